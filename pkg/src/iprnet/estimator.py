"""scikit-learn style facade over training, prediction and evaluation."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .episodes import SplitSpec, make_splits
from .evaluation import evaluate_model, predict_episodes
from .losses import LossWeights
from .model import EncoderConfig, ModelConfig
from .training import TrainConfig, load_checkpoint, read_log, train
from .validation import check_dataset, check_episodes


class FewShotSegmenter(BaseEstimator):
    """Episodic few-shot segmenter.

    ``fit`` trains on the training fold of ``X`` (a :class:`~iprnet.Dataset`,
    a dataset directory, or an image array with masks ``y``); the held-out
    fold is kept in ``test_classes_`` for :meth:`score`.  :meth:`predict`
    takes episodes and returns binary query masks.

    Example::

        est = FewShotSegmenter(max_iters=200).fit(generate_shapes_dataset())
        est.score(n_episodes=100)
    """

    def __init__(self, base_lr=0.05, momentum=0.9, weight_decay=1e-4, batch_size=4, max_iters=2000,
                 power=0.9, k_shots=5, n_splits=4, split_index=0, w1=0.4, w2=0.2, w3=0.4,
                 alpha=0.15, beta=0.15, gamma=0.7, iprm=True, rcm=True, proj_channels=48,
                 hidden=32, n_scales=3, head_hidden=32, seed=0, out_dir=None):
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_iters = max_iters
        self.power = power
        self.k_shots = k_shots
        self.n_splits = n_splits
        self.split_index = split_index
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.iprm = iprm
        self.rcm = rcm
        self.proj_channels = proj_channels
        self.hidden = hidden
        self.n_scales = n_scales
        self.head_hidden = head_hidden
        self.seed = seed
        self.out_dir = out_dir

    def to_config(self, all_classes=()):
        return TrainConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_iters=self.max_iters,
            power=self.power,
            k_shots=self.k_shots,
            split=SplitSpec(tuple(all_classes), self.n_splits, self.split_index),
            weights=LossWeights(self.w1 if self.iprm else 0.0, self.w2, self.w3,
                                self.alpha, self.beta, self.gamma),
            seed=self.seed,
            model=ModelConfig(
                encoder=EncoderConfig(),
                proj_channels=self.proj_channels,
                hidden=self.hidden,
                n_scales=self.n_scales,
                head_hidden=self.head_hidden,
                iprm=self.iprm,
                rcm=self.rcm,
            ),
        )

    def fit(self, X, y=None):
        dataset = check_dataset(X, y, divisor=EncoderConfig().total_downsample)
        config = self.to_config(sorted(dataset.class_ids))
        out_dir = Path(self.out_dir) if self.out_dir is not None else Path(tempfile.mkdtemp(prefix="iprnet-"))
        self.checkpoint_path_ = train(config, out_dir, dataset=dataset)
        self.model_, payload = load_checkpoint(self.checkpoint_path_)
        self.train_classes_, self.test_classes_ = make_splits(config.split)
        self.loss_history_ = read_log(out_dir / "train_log.jsonl")
        self.dataset_ = dataset
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict_proba(self, episodes):
        """Foreground probability ``(B, H, W)`` for each episode's query."""
        self._check_fitted()
        episodes = check_episodes(episodes)
        from .training import episode_tensors

        _, support_masks, targets = episode_tensors(episodes)
        q = torch.from_numpy(np.stack([ep.query_image for ep in episodes]).astype(np.float32))
        s = torch.from_numpy(np.stack([ep.support_images for ep in episodes]).astype(np.float32))
        with torch.no_grad():
            proba = self.model_.predict_proba(q, s, support_masks, targets)
        return proba[:, 1].numpy()

    def predict(self, episodes):
        """Binary query masks ``(B, H, W)``."""
        self._check_fitted()
        return predict_episodes(self.model_, check_episodes(episodes))

    def score(self, X=None, y=None, n_episodes=500, seed=0):
        """Mean IoU over ``n_episodes`` test episodes of the held-out fold."""
        self._check_fitted()
        dataset = self.dataset_ if X is None else check_dataset(X, y)
        report = evaluate_model(self.model_, dataset, self.test_classes_, self.k_shots, n_episodes, seed)
        return report.mean_iou
