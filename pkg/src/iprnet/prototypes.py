"""Masked average pooling, batch-wide prototype collection and relation loss."""

from __future__ import annotations

import csv
import functools
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .episodes import IGNORE_LABEL
from .exceptions import DegenerateVectorError, EmptyRegionError, IPRNetDiagnostic, ShapeError

EPS = 1e-8


@dataclass
class Prototype:
    vector: torch.Tensor
    class_id: int
    pixel_count: int

    def __post_init__(self):
        if self.pixel_count < 1:
            raise EmptyRegionError(f"prototype for class {self.class_id} has no pixels")


# class_id -> Prototype; one entry per class
PrototypeSet = dict


def as_label_tensor(mask):
    if isinstance(mask, torch.Tensor):
        return mask.long()
    return torch.as_tensor(np.asarray(mask), dtype=torch.long)


@functools.lru_cache(maxsize=64)
def grid_indices(src, dst):
    """Nearest source index for each of ``dst`` cells, sampling at cell centres."""
    return ((torch.arange(dst, dtype=torch.float64) + 0.5) * src / dst).floor().long().clamp_(max=src - 1)


def mask_to_grid(mask, size):
    """Nearest-neighbour resize of an integer mask ``(..., H, W)`` to ``size``.

    Label values are copied, never interpolated, so 255 stays 255.
    """
    mask = as_label_tensor(mask)
    h, w = size
    H, W = mask.shape[-2:]
    if (H, W) == (h, w):
        return mask
    rows = grid_indices(H, h)
    cols = grid_indices(W, w)
    return mask[..., rows[:, None], cols[None, :]]


def masked_average_pool(feature, mask, class_id):
    """Average the columns of a ``(C, h, w)`` feature map where ``mask == class_id``."""
    if feature.dim() != 3:
        raise ShapeError(f"feature must be (C, h, w), got {tuple(feature.shape)}")
    if class_id == IGNORE_LABEL:
        raise EmptyRegionError("the ignore label has no prototype")
    grid = mask_to_grid(mask, feature.shape[-2:])
    sel = (grid == class_id).to(feature.dtype)
    count = int(sel.sum().item())
    if count == 0:
        raise EmptyRegionError(f"class {class_id} absent from the {tuple(grid.shape)} grid")
    vector = (feature * sel).sum(dim=(1, 2)) / count
    return Prototype(vector, int(class_id), count)


def _class_sums(features, grids, classes):
    # features (N, C, h, w), grids (N, h, w) -> sums (K, C), counts (K,)
    onehot = torch.stack([(grids == c) for c in classes]).to(features.dtype)
    sums = torch.einsum("knhw,nchw->kc", onehot, features)
    counts = onehot.sum(dim=(1, 2, 3))
    return sums, counts


def collect_batch_prototypes(features, masks):
    """One prototype per class present in any mask, pooled over the whole batch.

    Per-image prototypes are merged by pixel-count weighting, which equals
    pooling over the union of all regions of that class.
    """
    if len(features) == 0 or len(features) != len(masks):
        raise ShapeError("features and masks must be aligned and non-empty")
    feats = torch.stack(list(features)) if not isinstance(features, torch.Tensor) else features
    size = feats.shape[-2:]
    grids = torch.stack([mask_to_grid(m, size) for m in masks])
    classes = sorted(set(torch.unique(grids).tolist()) - {IGNORE_LABEL})
    if not classes:
        return {}
    sums, counts = _class_sums(feats, grids, classes)
    return {
        c: Prototype(sums[i] / counts[i], c, int(counts[i].item()))
        for i, c in enumerate(classes)
    }


def collect_image_prototypes(features, masks):
    """Per-image prototypes, one per (image, class) pair with a nonempty region."""
    out = []
    for feat, mask in zip(features, masks):
        grid = mask_to_grid(mask, feat.shape[-2:])
        for c in sorted(set(torch.unique(grid).tolist()) - {IGNORE_LABEL}):
            out.append(masked_average_pool(feat, grid, c))
    return out


def cosine_similarity(p, q):
    p = torch.as_tensor(p)
    q = torch.as_tensor(q)
    np_, nq = torch.linalg.vector_norm(p), torch.linalg.vector_norm(q)
    if np_ < EPS or nq < EPS:
        raise DegenerateVectorError("cosine similarity of a near-zero vector is undefined")
    return torch.clamp(torch.dot(p, q) / (np_ * nq), -1.0, 1.0)


def relation_loss(protos):
    """Mean cosine similarity over all ordered pairs of prototypes of distinct classes.

    ``protos`` is a :data:`PrototypeSet` or a sequence of :class:`Prototype`;
    a sequence may repeat class ids (per-image nodes), in which case only
    pairs with different class ids are counted.  Returns 0 with a diagnostic
    when there are no such pairs.
    """
    items = list(protos.values()) if isinstance(protos, dict) else list(protos)
    if len(items) < 2:
        warnings.warn("relation loss needs at least two prototypes", IPRNetDiagnostic, stacklevel=2)
        ref = items[0].vector if items else torch.zeros(())
        return ref.new_zeros(())
    vectors = torch.stack([p.vector for p in items])
    labels = torch.tensor([p.class_id for p in items])
    norms = torch.linalg.vector_norm(vectors, dim=1, keepdim=True).clamp_min(EPS)
    unit = vectors / norms
    sim = (unit @ unit.T).clamp(-1.0, 1.0)
    pairs = labels[:, None] != labels[None, :]
    n_pairs = int(pairs.sum().item())
    if n_pairs == 0:
        warnings.warn("relation loss has no pairs of distinct classes", IPRNetDiagnostic, stacklevel=2)
        return vectors.new_zeros(())
    return sim[pairs].sum() / n_pairs


def similarity_map(prototype, query_feat):
    """Per-position cosine similarity between a prototype and a ``(C, h, w)`` map.

    Also accepts batched ``(B, C)`` prototypes with ``(B, C, h, w)`` maps.
    Zero-norm columns (or prototypes) map to 0.
    """
    vec = prototype.vector if isinstance(prototype, Prototype) else prototype
    if vec.shape[-1] != query_feat.shape[-3]:
        raise ShapeError(
            f"prototype has {vec.shape[-1]} channels, feature map has {query_feat.shape[-3]}"
        )
    num = torch.einsum("...c,...chw->...hw", vec, query_feat)
    den = torch.linalg.vector_norm(vec, dim=-1)[..., None, None] * torch.linalg.vector_norm(
        query_feat, dim=-3
    )
    valid = den > EPS
    out = torch.where(valid, num / den.clamp_min(EPS), torch.zeros_like(num))
    return out.clamp(-1.0, 1.0)


def write_prototype_csv(rows, path):
    """Write ``(episode_id, Prototype)`` rows as CSV.

    Columns: episode_id, class_id, pixel_count, v0..v{C-1}.
    """
    rows = list(rows)
    dim = len(rows[0][1].vector) if rows else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_id", "class_id", "pixel_count"] + [f"v{i}" for i in range(dim)])
        for episode_id, proto in rows:
            vec = proto.vector.detach().cpu().double().tolist()
            writer.writerow([episode_id, proto.class_id, proto.pixel_count] + [repr(v) for v in vec])
    return path


def read_prototype_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        vcols = [c for c in reader.fieldnames if c.startswith("v")]
        for row in reader:
            vec = torch.tensor([float(row[c]) for c in vcols], dtype=torch.float64)
            out.append((int(row["episode_id"]), Prototype(vec, int(row["class_id"]), int(row["pixel_count"]))))
    return out
