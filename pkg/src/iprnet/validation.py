"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .episodes import BACKGROUND, IGNORE_LABEL, Dataset, Episode, class_ids_of
from .exceptions import ConfigurationError, ShapeError


def check_images(images, divisor=1):
    """Return ``images`` as a finite float32 ``(N, 3, H, W)`` array."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"images must be (N, 3, H, W), got {images.shape}")
    if not np.issubdtype(images.dtype, np.number):
        raise ConfigurationError("images", f"must be numeric, got dtype {images.dtype}")
    images = images.astype(np.float32, copy=False)
    if not np.isfinite(images).all():
        raise ConfigurationError("images", "contain NaN or infinite values")
    H, W = images.shape[-2:]
    if H % divisor or W % divisor:
        raise ShapeError(f"image size {(H, W)} must be divisible by {divisor}")
    return images


def check_masks(masks, images=None):
    """Return ``masks`` as a uint8 ``(N, H, W)`` label array aligned with ``images``."""
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.ndim != 3:
        raise ShapeError(f"masks must be (N, H, W), got {masks.shape}")
    if not np.issubdtype(masks.dtype, np.integer):
        if not np.array_equal(masks, np.round(masks)):
            raise ConfigurationError("masks", "must hold integer labels")
    if masks.min(initial=0) < 0 or masks.max(initial=0) > IGNORE_LABEL:
        raise ConfigurationError("masks", "labels must lie in [0, 255]")
    masks = masks.astype(np.uint8)
    if images is not None and masks.shape != (images.shape[0],) + images.shape[2:]:
        raise ShapeError(f"masks {masks.shape} do not match images {images.shape}")
    return masks


def check_dataset(X, y=None, divisor=1):
    """Accept a :class:`Dataset`, a dataset directory, or ``(images, masks)`` arrays."""
    from .episodes import load_dataset

    if isinstance(X, Dataset):
        if y is not None:
            raise ConfigurationError("y", "must be None when X is a Dataset")
        check_images(X.images[:1], divisor)
        return X
    if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        return load_dataset(X)
    if y is None:
        raise ConfigurationError("y", "masks are required when X is an image array")
    images = check_images(X, divisor)
    masks = check_masks(y, images)
    classes = frozenset(c for c in class_ids_of(masks) if c not in (BACKGROUND, IGNORE_LABEL))
    return Dataset(np.array(images), np.array(masks), classes)


def check_episodes(episodes):
    """Episodes in a batch must share ``k`` and the image size."""
    if isinstance(episodes, Episode):
        episodes = [episodes]
    episodes = list(episodes)
    if not episodes:
        raise ConfigurationError("episodes", "is empty")
    k = episodes[0].k
    size = episodes[0].query_image.shape
    for ep in episodes:
        if not isinstance(ep, Episode):
            raise ConfigurationError("episodes", f"expected Episode, got {type(ep).__name__}")
        if ep.k != k or ep.k < 1:
            raise ShapeError("every episode in a batch needs the same number of shots")
        if ep.query_image.shape != size or ep.support_images.shape[1:] != size:
            raise ShapeError("every image in a batch needs the same size")
    return episodes
