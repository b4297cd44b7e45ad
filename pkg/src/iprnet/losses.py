"""Loss terms: ignore transform, masked and ignore-aware cross-entropy, RCM and total losses."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .episodes import IGNORE_LABEL
from .exceptions import ConfigurationError, DomainError, IPRNetDiagnostic, NumericError, ShapeError
from .prototypes import as_label_tensor, mask_to_grid

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w1: float = 0.4
    w2: float = 0.2
    w3: float = 0.4
    alpha: float = 0.15
    beta: float = 0.15
    gamma: float = 0.7

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ConfigurationError(f"weights.{name}", f"must be nonnegative, got {value}")


@dataclass
class LossBreakdown:
    L_r: float
    L_m: float
    L_1: float
    L_0: float
    L_f: float
    L_p: float
    total: float

    def as_dict(self):
        return asdict(self)


def ignore_transform(mask, c):
    """Keep pixels labelled ``c`` and turn every other pixel into 255."""
    if c not in (0, 1):
        raise DomainError(f"class id must be 0 or 1, got {c}")
    mask = as_label_tensor(mask)
    return torch.where(mask == c, torch.full_like(mask, c), torch.full_like(mask, IGNORE_LABEL))


def _batched(V, mask):
    V = torch.as_tensor(V)
    mask = as_label_tensor(mask)
    if V.dim() == 3:
        V = V.unsqueeze(0)
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if V.dim() != 4 or V.shape[1] != 2:
        raise ShapeError(f"expected (2, h, w) or (B, 2, h, w) input, got {tuple(V.shape)}")
    if V.shape[0] != mask.shape[0] or V.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"prediction {tuple(V.shape)} and mask {tuple(mask.shape)} disagree")
    return V, mask


def _mean_over_valid(nll, valid, what):
    # per-sample mean over valid positions, then mean over samples that have any
    counts = valid.sum(dim=(1, 2))
    keep = counts > 0
    if not bool(keep.any()):
        warnings.warn(f"{what}: no valid positions, returning 0", IPRNetDiagnostic, stacklevel=3)
        return nll.new_zeros(())
    sums = torch.where(valid, nll, torch.zeros_like(nll)).sum(dim=(1, 2))
    return (sums[keep] / counts[keep]).mean()


def masked_cross_entropy(V, mask, c):
    """Mean ``-log V[1]`` over positions labelled ``c``; everything else is ignored.

    Channel 1 is the positive channel of every two-channel head, so for the
    background head ``V[1]`` is the background probability.
    """
    V, mask = _batched(V, mask)
    selected = ignore_transform(mask, c) != IGNORE_LABEL
    nll = -torch.log(V[:, 1].clamp(PROB_FLOOR, 1.0))
    return _mean_over_valid(nll, selected, "masked_cross_entropy")


def cross_entropy_probs(V, mask):
    """Two-class cross-entropy of softmax outputs against a {0, 1, 255} mask."""
    V, mask = _batched(V, mask)
    valid = mask != IGNORE_LABEL
    labels = torch.where(valid, mask, torch.zeros_like(mask)).clamp(0, 1)
    picked = V.gather(1, labels.unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked.clamp(PROB_FLOOR, 1.0))
    return _mean_over_valid(nll, valid, "cross_entropy")


def cross_entropy_logits(logits, mask):
    logits, mask = _batched(logits, mask)
    valid = mask != IGNORE_LABEL
    labels = torch.where(valid, mask, torch.zeros_like(mask)).clamp(0, 1)
    nll = -F.log_softmax(logits, dim=1).gather(1, labels.unsqueeze(1)).squeeze(1)
    return _mean_over_valid(nll, valid, "cross_entropy")


def _to_mask_size(V, size):
    if V.shape[-2:] == tuple(size):
        return V
    squeeze = V.dim() == 3
    V = V.unsqueeze(0) if squeeze else V
    # bilinear weights are convex, so probabilities stay normalised
    V = F.interpolate(V, size=tuple(size), mode="bilinear", align_corners=False)
    return V.squeeze(0) if squeeze else V


def rcm_loss(outs, query_mask, weights=LossWeights()):
    """Return ``(L_p, L_1, L_0, L_f)`` for the three RCM heads.

    Head outputs coarser than the mask are bilinearly upsampled to it.  When
    the branch heads are absent (``outs.V1 is None``) only the fused head is
    supervised and ``L_p = L_f``.
    """
    mask = as_label_tensor(query_mask)
    size = mask.shape[-2:]
    Vf = _to_mask_size(outs.Vf, size)
    L_f = cross_entropy_probs(Vf, mask)
    if outs.V1 is None:
        zero = L_f.new_zeros(())
        return L_f, zero, zero, L_f
    L_1 = masked_cross_entropy(_to_mask_size(outs.V1, size), mask, 1)
    L_0 = masked_cross_entropy(_to_mask_size(outs.V0, size), mask, 0)
    L_p = weights.alpha * L_1 + weights.beta * L_0 + weights.gamma * L_f
    return L_p, L_1, L_0, L_f


def multiscale_loss(per_scale_logits, query_mask):
    """Average ignore-aware cross-entropy over all scales of the decoder."""
    if len(per_scale_logits) == 0:
        raise DomainError("multiscale_loss needs at least one scale")
    mask = as_label_tensor(query_mask)
    losses = [
        cross_entropy_logits(logits, mask_to_grid(mask, logits.shape[-2:]))
        for logits in per_scale_logits
    ]
    return torch.stack(losses).mean()


def _finite(term, value):
    v = value.detach() if isinstance(value, torch.Tensor) else value
    if not math.isfinite(float(v)):
        raise NumericError(term, float(v))


def total_loss(L_r, L_m, L_p, weights=LossWeights()):
    _finite("L_r", L_r)
    _finite("L_m", L_m)
    _finite("L_p", L_p)
    return weights.w1 * L_r + weights.w2 * L_m + weights.w3 * L_p


def breakdown(L_r, L_m, L_1, L_0, L_f, L_p, total):
    as_float = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    return LossBreakdown(*(as_float(v) for v in (L_r, L_m, L_1, L_0, L_f, L_p, total)))
