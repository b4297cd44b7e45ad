"""Few-shot segmentation with interclass prototype relations and respective classifiers."""

from .episodes import (
    Dataset,
    Episode,
    EpisodeSampler,
    ShapesConfig,
    SplitSpec,
    generate_shapes_dataset,
    load_dataset,
    make_splits,
    sample_episode,
    save_dataset,
)
from .estimator import FewShotSegmenter
from .evaluation import IoUReport, evaluate, prototype_separation, run_ablation
from .losses import LossBreakdown, LossWeights
from .model import EncoderConfig, IPRNet, ModelConfig
from .training import TrainConfig, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EncoderConfig",
    "Episode",
    "EpisodeSampler",
    "FewShotSegmenter",
    "IPRNet",
    "IoUReport",
    "LossBreakdown",
    "LossWeights",
    "ModelConfig",
    "ShapesConfig",
    "SplitSpec",
    "TrainConfig",
    "evaluate",
    "generate_shapes_dataset",
    "load_checkpoint",
    "load_dataset",
    "make_splits",
    "prototype_separation",
    "run_ablation",
    "sample_episode",
    "save_dataset",
    "train",
]
