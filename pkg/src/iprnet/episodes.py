"""Synthetic shapes dataset, class-fold splits and episodic sampling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .exceptions import ConfigurationError, SamplingError, ShapeError

IGNORE_LABEL = 255
BACKGROUND = 0

SHAPES = ("triangle", "disc", "square", "cross")
TEXTURES = ("hstripes", "dots", "checker", "vstripes", "dstripes", "solid")

# cross arm half-width relative to arm length
_CROSS_WIDTH = 0.33
_CROSS_SCALE = 1.0 / np.hypot(1.0, _CROSS_WIDTH)


@dataclass(frozen=True)
class ShapesConfig:
    n_classes: int = 8
    images_per_class: int = 20
    image_size: int = 64
    shapes_per_image: int = 3
    seed: int = 0
    k_max: int = 5

    def validate(self):
        if self.n_classes < 4:
            raise ConfigurationError("n_classes", f"must be >= 4, got {self.n_classes}")
        if self.n_classes > len(SHAPES) * len(TEXTURES):
            raise ConfigurationError(
                "n_classes", f"at most {len(SHAPES) * len(TEXTURES)} shape/texture families exist"
            )
        if self.image_size < 32:
            raise ConfigurationError("image_size", f"must be >= 32, got {self.image_size}")
        if self.k_max < 1:
            raise ConfigurationError("k_max", "must be >= 1")
        if self.images_per_class < self.k_max + 1:
            raise ConfigurationError(
                "images_per_class",
                f"must be >= k_max + 1 = {self.k_max + 1}, got {self.images_per_class}",
            )
        if self.shapes_per_image < 1:
            raise ConfigurationError("shapes_per_image", "must be >= 1")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def class_family(class_id):
    """Return the ``(shape, texture)`` family drawn for ``class_id``.

    Classes ``c`` and ``c + len(SHAPES)`` share a shape and differ only in
    texture, so contiguous folds always hold out classes whose shape twin
    stays in the training pool.
    """
    idx = class_id - 1
    return SHAPES[idx % len(SHAPES)], TEXTURES[(idx // len(SHAPES)) % len(TEXTURES)]


def _pixel_grid(size):
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords)  # xs, ys


def _convex_polygon_mask(xs, ys, vertices):
    # vertices counter-clockwise; inside = left of every edge
    inside = np.ones(xs.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        inside &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) > 0
    return inside


def shape_vertices(params):
    """Polygon vertices (counter-clockwise) for polygonal shapes."""
    cx, cy, r, angle = params["cx"], params["cy"], params["r"], params["angle"]
    kind = params["shape"]
    if kind == "triangle":
        thetas = angle + 2 * np.pi * np.arange(3) / 3
    elif kind == "square":
        thetas = angle + np.pi / 4 + np.pi / 2 * np.arange(4)
    elif kind == "cross":
        a = r * _CROSS_SCALE
        w = a * _CROSS_WIDTH
        local = [(a, -w), (a, w), (w, w), (w, a), (-w, a), (-w, w),
                 (-a, w), (-a, -w), (-w, -w), (-w, -a), (w, -a), (w, -w)]
        c, s = np.cos(angle), np.sin(angle)
        return [(cx + c * x - s * y, cy + s * x + c * y) for x, y in local]
    else:
        raise ValueError(f"{kind} is not a polygon")
    return [(cx + r * np.cos(t), cy + r * np.sin(t)) for t in thetas]


def rasterize_shape(params, size):
    """Boolean (size, size) raster of a recorded shape, sampled at pixel centres."""
    xs, ys = _pixel_grid(size)
    kind = params["shape"]
    if kind == "disc":
        return (xs - params["cx"]) ** 2 + (ys - params["cy"]) ** 2 < params["r"] ** 2
    verts = shape_vertices(params)
    if kind == "cross":
        # union of the two arms, each a convex rectangle
        arm_a = [verts[i] for i in (0, 1, 6, 7)]
        arm_b = [verts[i] for i in (3, 4, 9, 10)]
        return _convex_polygon_mask(xs, ys, arm_a) | _convex_polygon_mask(xs, ys, arm_b)
    return _convex_polygon_mask(xs, ys, verts)


def texture_pattern(texture, size, period, phase):
    xs, ys = _pixel_grid(size)
    xs = xs + phase[0]
    ys = ys + phase[1]
    if texture == "hstripes":
        return (np.floor(ys / period) % 2).astype(bool)
    if texture == "vstripes":
        return (np.floor(xs / period) % 2).astype(bool)
    if texture == "dstripes":
        return (np.floor((xs + ys) / (period * 1.4142)) % 2).astype(bool)
    if texture == "checker":
        return ((np.floor(xs / period) + np.floor(ys / period)) % 2).astype(bool)
    if texture == "dots":
        dx = (xs % (2 * period)) - period
        dy = (ys % (2 * period)) - period
        return dx ** 2 + dy ** 2 < (0.6 * period) ** 2
    if texture == "solid":
        return np.ones_like(xs, dtype=bool)
    raise ValueError(f"unknown texture {texture!r}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of (image, mask) items.

    ``images`` is ``(N, 3, H, W)`` float32 in [0, 1]; ``masks`` is ``(N, H, W)``
    uint8 holding class ids, 0 for background and 255 for ignore.
    """

    images: np.ndarray
    masks: np.ndarray
    class_ids: frozenset
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise ShapeError(
                f"masks {self.masks.shape} do not match images {self.images.shape}"
            )
        allowed = set(self.class_ids) | {BACKGROUND, IGNORE_LABEL}
        present = set(np.unique(self.masks).tolist())
        if not present <= allowed:
            raise ConfigurationError(
                "class_ids", f"mask values {sorted(present - allowed)} not declared"
            )
        self.images.flags.writeable = False
        self.masks.flags.writeable = False

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, index):
        return self.images[index], self.masks[index]

    @property
    def items(self):
        return [self[i] for i in range(len(self))]

    @property
    def image_size(self):
        return self.images.shape[2], self.images.shape[3]

    @cached_property
    def _class_index(self):
        index = {}
        for i, mask in enumerate(self.masks):
            for c in np.unique(mask).tolist():
                if c in self.class_ids:
                    index.setdefault(c, []).append(i)
        return {c: np.asarray(v, dtype=np.int64) for c, v in index.items()}

    def items_with_class(self, class_id):
        """Indices of items whose mask contains ``class_id``."""
        return self._class_index.get(class_id, np.zeros(0, dtype=np.int64))


def generate_shapes_dataset(config=None, **overrides):
    """Render a deterministic shapes/textures dataset.

    Every class owns ``images_per_class`` items in which it is the primary
    (largest) shape; each item also receives up to ``shapes_per_image - 1``
    non-overlapping distractor shapes of other classes, labelled with their
    own ids.  Shape parameters are kept in ``metadata["shapes"]`` so masks can
    be re-derived.
    """
    if config is None:
        config = ShapesConfig(**overrides)
    elif isinstance(config, dict):
        config = ShapesConfig(**{**config, **overrides})
    config.validate()

    rng = np.random.default_rng(config.seed)
    size = config.image_size
    scale = size / 64.0
    period = max(3.0, 4.0 * scale)
    n_items = config.n_classes * config.images_per_class

    images = np.empty((n_items, 3, size, size), dtype=np.float32)
    masks = np.zeros((n_items, size, size), dtype=np.uint8)
    records = []
    xs, ys = _pixel_grid(size)

    item = 0
    for primary in range(1, config.n_classes + 1):
        others = [c for c in range(1, config.n_classes + 1) if c != primary]
        for _ in range(config.images_per_class):
            # smooth two-colour gradient background plus noise
            c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
            theta = rng.uniform(0, 2 * np.pi)
            t = ((xs - size / 2) * np.cos(theta) + (ys - size / 2) * np.sin(theta)) / size + 0.5
            img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
            img = img + rng.normal(0.0, 0.04, size=img.shape)

            n_distract = int(rng.integers(0, config.shapes_per_image))
            wanted = [primary] + list(rng.choice(others, size=n_distract, replace=True))
            placed = []
            for j, cls in enumerate(wanted):
                lo, hi = ((0.16, 0.26) if j == 0 else (0.11, 0.19))
                for _attempt in range(50):
                    r = float(rng.uniform(lo, hi) * size)
                    cx = float(rng.uniform(r + 1, size - r - 1))
                    cy = float(rng.uniform(r + 1, size - r - 1))
                    if all(np.hypot(cx - p["cx"], cy - p["cy"]) > r + p["r"] + 1 for p in placed):
                        break
                else:
                    continue
                shape, texture = class_family(int(cls))
                params = {
                    "class_id": int(cls),
                    "shape": shape,
                    "texture": texture,
                    "cx": cx,
                    "cy": cy,
                    "r": r,
                    "angle": float(rng.uniform(0, 2 * np.pi)),
                    "phase": [float(v) for v in rng.uniform(0, 2 * period, size=2)],
                    "color": [float(v) for v in rng.uniform(0.35, 1.0, size=3)],
                }
                region = rasterize_shape(params, size)
                pattern = texture_pattern(texture, size, period, params["phase"])
                color = np.asarray(params["color"])
                fill = np.where(pattern, 1.0, 0.3)[None] * color[:, None, None]
                img = np.where(region[None], fill, img)
                masks[item][region] = cls
                placed.append(params)
            images[item] = np.clip(img, 0.0, 1.0)
            records.append(placed)
            item += 1

    metadata = {
        "config": asdict(config),
        "config_hash": config.digest(),
        "shapes": records,
    }
    return Dataset(images, masks, frozenset(range(1, config.n_classes + 1)), metadata)


def save_dataset(dataset, directory):
    """Write ``images/NNNN.png``, ``masks/NNNN.png`` and ``meta.json``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(len(dataset)):
        name = f"{i:04d}.png"
        rgb = np.round(dataset.images[i].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(directory / "images" / name)
        Image.fromarray(dataset.masks[i], mode="L").save(directory / "masks" / name)
        entry = {"image": f"images/{name}", "mask": f"masks/{name}"}
        shapes = dataset.metadata.get("shapes")
        if shapes is not None:
            entry["shapes"] = shapes[i]
        items.append(entry)
    meta = {
        "config": dataset.metadata.get("config"),
        "config_hash": dataset.metadata.get("config_hash"),
        "class_ids": sorted(dataset.class_ids),
        "items": items,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_dataset(directory):
    """Load a dataset directory in the layout written by :func:`save_dataset`.

    ``meta.json`` may omit ``class_ids`` (inferred from the masks) and
    ``config``; user-supplied real data only needs the ``items`` list.
    """
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    images, masks = [], []
    for entry in meta["items"]:
        rgb = np.asarray(Image.open(directory / entry["image"]).convert("RGB"))
        images.append(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
        masks.append(np.asarray(Image.open(directory / entry["mask"]), dtype=np.uint8))
    images = np.stack(images)
    masks = np.stack(masks)
    if "class_ids" in meta:
        class_ids = frozenset(int(c) for c in meta["class_ids"])
    else:
        values = set(np.unique(masks).tolist()) - {BACKGROUND, IGNORE_LABEL}
        class_ids = frozenset(values)
    metadata = {"config": meta.get("config"), "config_hash": meta.get("config_hash")}
    if all("shapes" in e for e in meta["items"]):
        metadata["shapes"] = [e["shapes"] for e in meta["items"]]
    return Dataset(images, masks, class_ids, metadata)


@dataclass(frozen=True)
class SplitSpec:
    all_classes: tuple
    n_splits: int = 4
    split_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "all_classes", tuple(self.all_classes))


def make_splits(spec):
    """Return ``(train_classes, test_classes)`` for one contiguous fold."""
    classes = list(spec.all_classes)
    if spec.n_splits < 1:
        raise ConfigurationError("n_splits", "must be >= 1")
    if len(set(classes)) != len(classes):
        raise ConfigurationError("all_classes", "contains duplicates")
    if len(classes) % spec.n_splits:
        raise ConfigurationError(
            "n_splits", f"{len(classes)} classes are not divisible into {spec.n_splits} folds"
        )
    if not 0 <= spec.split_index < spec.n_splits:
        raise ConfigurationError(
            "split_index", f"must lie in [0, {spec.n_splits}), got {spec.split_index}"
        )
    fold = len(classes) // spec.n_splits
    test = classes[spec.split_index * fold:(spec.split_index + 1) * fold]
    train = [c for c in classes if c not in test]
    return set(train), set(test)


@dataclass(frozen=True, eq=False)
class Episode:
    query_image: np.ndarray
    query_mask: np.ndarray
    supports: list
    target_class: int
    query_index: int = -1
    support_indices: tuple = ()

    @property
    def k(self):
        return len(self.supports)

    @property
    def support_images(self):
        return np.stack([img for img, _ in self.supports])

    @property
    def support_masks(self):
        return np.stack([m for _, m in self.supports])


def binarize_mask(mask, target_class, hidden_classes=()):
    out = np.where(mask == target_class, 1, 0).astype(np.uint8)
    out[mask == IGNORE_LABEL] = IGNORE_LABEL
    for c in hidden_classes:
        out[mask == c] = IGNORE_LABEL
    return out


def hide_classes(mask, hidden_classes):
    if not hidden_classes:
        return mask
    out = mask.copy()
    out[np.isin(mask, list(hidden_classes))] = IGNORE_LABEL
    return out


def sample_episode(dataset, class_pool, k, rng, hidden_classes=()):
    """Draw one ``k``-shot episode whose target class comes from ``class_pool``.

    The query mask is binarised to {0, 1, 255}; support masks keep every
    class label.  Labels in ``hidden_classes`` are turned into 255 in all
    returned masks (used to keep held-out classes out of training episodes).
    """
    if k < 1:
        raise ConfigurationError("k", f"must be >= 1, got {k}")
    pool = sorted(class_pool)
    if not pool:
        raise ConfigurationError("class_pool", "is empty")
    unknown = set(pool) - set(dataset.class_ids)
    if unknown:
        raise ConfigurationError("class_pool", f"classes {sorted(unknown)} not in dataset")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    target = int(pool[rng.integers(len(pool))])
    candidates = dataset.items_with_class(target)
    if len(candidates) < k + 1:
        raise SamplingError(
            target, f"only {len(candidates)} items contain it, {k + 1} needed for k={k}"
        )
    chosen = rng.choice(candidates, size=k + 1, replace=False)
    query_idx, support_idx = int(chosen[0]), tuple(int(i) for i in chosen[1:])
    hidden = tuple(sorted(set(hidden_classes)))

    query_mask = binarize_mask(dataset.masks[query_idx], target, hidden)
    supports = [
        (dataset.images[i], hide_classes(dataset.masks[i], hidden)) for i in support_idx
    ]
    return Episode(
        query_image=dataset.images[query_idx],
        query_mask=query_mask,
        supports=supports,
        target_class=target,
        query_index=query_idx,
        support_indices=support_idx,
    )


class EpisodeSampler:
    """Stateful sampler owning its own generator."""

    def __init__(self, dataset, class_pool, k, seed=0, hidden_classes=()):
        self.dataset = dataset
        self.class_pool = frozenset(class_pool)
        self.k = k
        self.hidden_classes = tuple(hidden_classes)
        self.rng = np.random.default_rng(seed)

    def sample(self):
        return sample_episode(self.dataset, self.class_pool, self.k, self.rng, self.hidden_classes)

    def sample_batch(self, batch_size):
        return [self.sample() for _ in range(batch_size)]

    def __iter__(self):
        while True:
            yield self.sample()


def class_ids_of(masks: Iterable[np.ndarray]) -> Sequence[int]:
    values = set()
    for m in masks:
        values.update(np.unique(m).tolist())
    return sorted(values - {IGNORE_LABEL})
