"""Episodic SGD training with the poly learning-rate schedule, logging and checkpoints."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .episodes import (
    EpisodeSampler,
    ShapesConfig,
    SplitSpec,
    generate_shapes_dataset,
    load_dataset,
    make_splits,
)
from .exceptions import CheckpointMismatchError, ConfigurationError, DomainError, IPRNetDiagnostic
from .losses import LossWeights, breakdown, multiscale_loss, rcm_loss, total_loss
from .model import IPRNet, ModelConfig
from .prototypes import collect_batch_prototypes, collect_image_prototypes, relation_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "iprnet-checkpoint"
CHECKPOINT_VERSION = 1


def poly_lr(base_lr, iter, max_iters, power=0.9):
    """``base_lr * (1 - iter / max_iters) ** power``."""
    if not 0 <= iter <= max_iters:
        raise DomainError(f"iter must lie in [0, {max_iters}], got {iter}")
    if max_iters == 0:
        return base_lr
    return base_lr * (1.0 - iter / max_iters) ** power


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 4
    max_iters: int = 2000
    power: float = 0.9
    k_shots: int = 5
    split: SplitSpec = field(default_factory=lambda: SplitSpec(()))
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 0
    eval_episodes: int = 100
    checkpoint_every: int = 0
    relation_per_image_pairs: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    data: dict = field(default_factory=lambda: asdict(ShapesConfig()))
    data_dir: str | None = None

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr", f"must be > 0, got {self.base_lr}")
        if not self.power > 0:
            raise ConfigurationError("power", f"must be > 0, got {self.power}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size", f"must be >= 2, got {self.batch_size}")
        if self.max_iters < 0:
            raise ConfigurationError("max_iters", "must be >= 0")
        if self.k_shots < 1:
            raise ConfigurationError("k_shots", "must be >= 1")
        if self.data is not None:
            object.__setattr__(self, "data", {**asdict(ShapesConfig()), **self.data})

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError("config", f"unknown fields {sorted(unknown)}")
        if "split" in d and not isinstance(d["split"], SplitSpec):
            split = dict(d["split"])
            split.setdefault("all_classes", ())
            d["split"] = SplitSpec(**split)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        if "model" in d and not isinstance(d["model"], ModelConfig):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["split"] = {
            "all_classes": list(self.split.all_classes),
            "n_splits": self.split.n_splits,
            "split_index": self.split.split_index,
        }
        out["weights"] = asdict(self.weights)
        out["model"] = self.model.to_dict()
        out["data"] = dict(self.data) if self.data is not None else None
        return out

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)

    def load_dataset(self):
        if self.data_dir:
            return load_dataset(self.data_dir)
        return generate_shapes_dataset(ShapesConfig(**self.data))

    def resolve_split(self, dataset):
        split = self.split
        if not split.all_classes:
            split = replace(split, all_classes=tuple(sorted(dataset.class_ids)))
        return split


def make_optimizer(model, config):
    return torch.optim.SGD(
        model.trainable_parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def encode_dataset(model, dataset, chunk=64):
    """Backbone features for every dataset item; valid while the encoder is frozen."""
    feats = []
    with torch.no_grad():
        for start in range(0, len(dataset), chunk):
            images = torch.from_numpy(np.array(dataset.images[start:start + chunk]))
            feats.append(model.backbone(images))
    return torch.cat(feats)


def episode_tensors(batch):
    query_masks = torch.as_tensor(np.stack([ep.query_mask for ep in batch]), dtype=torch.long)
    support_masks = torch.as_tensor(np.stack([ep.support_masks for ep in batch]), dtype=torch.long)
    targets = torch.tensor([ep.target_class for ep in batch], dtype=torch.long)
    return query_masks, support_masks, targets


def raw_features(model, batch, feature_cache=None):
    """Backbone output ``(B, C, h, w)`` for queries and ``(B, k, C, h, w)`` for supports."""
    B, k = len(batch), batch[0].k
    if feature_cache is not None and all(ep.query_index >= 0 for ep in batch):
        q_idx = torch.tensor([ep.query_index for ep in batch])
        s_idx = torch.tensor([ep.support_indices for ep in batch])
        return feature_cache[q_idx], feature_cache[s_idx.flatten()].view(B, k, *feature_cache.shape[1:])
    dtype = next(model.parameters()).dtype
    q = model.backbone(torch.from_numpy(np.stack([ep.query_image for ep in batch])).to(dtype))
    s = model.backbone(torch.from_numpy(np.concatenate([ep.support_images for ep in batch])).to(dtype))
    return q, s.view(B, k, *s.shape[1:])


def compute_losses(model, batch, weights, feature_cache=None, per_image_pairs=False):
    """Forward a batch of episodes and return the loss tensors.

    Episodes whose target vanishes on the feature grid are dropped with a
    diagnostic; returns ``None`` when nothing is left.
    """
    query_masks, support_masks, targets = episode_tensors(batch)
    q_raw, s_raw = raw_features(model, batch, feature_cache)
    q_feat = model.embed(q_raw)
    B, k = s_raw.shape[:2]
    s_feat = model.embed(s_raw.flatten(0, 1)).view(B, k, -1, *s_raw.shape[-2:])

    if model.config.iprm:
        flat_feat = s_feat.flatten(0, 1)
        flat_masks = support_masks.flatten(0, 1)
        if per_image_pairs:
            protos = collect_image_prototypes(flat_feat, flat_masks)
        else:
            protos = collect_batch_prototypes(flat_feat, flat_masks)
        L_r = relation_loss(protos)
    else:
        L_r = q_feat.new_zeros(())

    out = model.forward_features(q_feat, s_feat, support_masks, targets)
    keep = out["fg_count"] > 0
    if not bool(keep.all()):
        dropped = targets[~keep].tolist()
        warnings.warn(f"skipping episodes whose target vanished on the grid: {dropped}", IPRNetDiagnostic)
        if not bool(keep.any()):
            return None
    logits = [lg[keep] for lg in out["logits"]]
    outs = out["outs"]
    outs = type(outs)(
        None if outs.V1 is None else outs.V1[keep],
        None if outs.V0 is None else outs.V0[keep],
        outs.Vf[keep],
    )
    qm = query_masks[keep]
    L_m = multiscale_loss(logits, qm)
    L_p, L_1, L_0, L_f = rcm_loss(outs, qm, weights)
    total = total_loss(L_r, L_m, L_p, weights)
    return {"L_r": L_r, "L_m": L_m, "L_1": L_1, "L_0": L_0, "L_f": L_f, "L_p": L_p, "total": total}


def train_step(model, batch, weights, optimizer, feature_cache=None, per_image_pairs=False):
    """One SGD update on a batch of episodes; returns the :class:`LossBreakdown`."""
    if not batch:
        raise ConfigurationError("batch", "is empty")
    model.train()
    losses = compute_losses(model, batch, weights, feature_cache, per_image_pairs)
    if losses is None:
        return None
    optimizer.zero_grad(set_to_none=False)
    losses["total"].backward()
    optimizer.step()
    return breakdown(**losses)


def build_model(config, seed=None):
    torch.manual_seed(config.seed if seed is None else seed)
    return IPRNet(config.model)


def save_checkpoint(path, model, optimizer, config, iteration, train_classes, test_classes, dataset_hash=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": int(iteration),
        "train_classes": sorted(int(c) for c in train_classes),
        "test_classes": sorted(int(c) for c in test_classes),
        "dataset_hash": dataset_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Load a checkpoint and rebuild its model; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path} is not an iprnet checkpoint")
    if payload.get("format_version", 0) > CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"checkpoint version {payload['format_version']} is newer than supported {CHECKPOINT_VERSION}"
        )
    config = TrainConfig.from_dict(payload["config"])
    model = IPRNet(config.model)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    payload["train_config"] = config
    return model, payload


def train(config, out_dir, dataset=None):
    """Run ``config.max_iters`` episodic SGD steps and return the final checkpoint path.

    Writes ``train_log.jsonl`` (one line per iteration: iter, lr and the seven
    loss fields) and ``checkpoint.pt``; intermediate checkpoints every
    ``checkpoint_every`` iterations.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = config.load_dataset()
    split = config.resolve_split(dataset)
    train_classes, test_classes = make_splits(split)
    missing = train_classes - set(dataset.class_ids)
    if missing:
        raise ConfigurationError("split.all_classes", f"classes {sorted(missing)} absent from the dataset")
    config = replace(config, split=split)

    model = build_model(config)
    optimizer = make_optimizer(model, config)
    cache = encode_dataset(model, dataset) if config.model.encoder.frozen else None
    sampler = EpisodeSampler(
        dataset, train_classes, config.k_shots, seed=config.seed, hidden_classes=test_classes
    )
    dataset_hash = dataset.metadata.get("config_hash")
    eval_log = None
    if config.eval_every:
        from .evaluation import evaluate_model

        eval_log = open(out_dir / "eval_log.jsonl", "w")

    with open(out_dir / "train_log.jsonl", "w") as log:
        for it in range(config.max_iters):
            lr = poly_lr(config.base_lr, it, config.max_iters, config.power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = sampler.sample_batch(config.batch_size)
            for ep in batch:
                assert_train_episode(ep, train_classes, test_classes)
            result = train_step(
                model, batch, config.weights, optimizer, cache, config.relation_per_image_pairs
            )
            if result is None:
                continue
            log.write(json.dumps({"iter": it, "lr": lr, **result.as_dict()}) + "\n")
            step = it + 1
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.max_iters:
                save_checkpoint(out_dir / f"checkpoint_{step:06d}.pt", model, optimizer, config,
                                step, train_classes, test_classes, dataset_hash)
            if eval_log is not None and step % config.eval_every == 0:
                report = evaluate_model(model, dataset, test_classes, config.k_shots,
                                        config.eval_episodes, seed=config.seed, feature_cache=cache)
                eval_log.write(json.dumps({"iter": it, "mean_iou": report.mean_iou}) + "\n")
                eval_log.flush()
    if eval_log is not None:
        eval_log.close()
    return save_checkpoint(out_dir / "checkpoint.pt", model, optimizer, config, config.max_iters,
                           train_classes, test_classes, dataset_hash)


def assert_train_episode(episode, train_classes, test_classes):
    if episode.target_class not in train_classes or episode.target_class in test_classes:
        raise AssertionError(f"train episode carries class {episode.target_class} outside the train pool")
    for _, mask in episode.supports:
        leaked = set(np.unique(mask).tolist()) & set(test_classes)
        if leaked:
            raise AssertionError(f"train episode support carries held-out classes {sorted(leaked)}")


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
    return path
