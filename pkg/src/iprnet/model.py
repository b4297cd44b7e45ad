"""Frozen feature encoder, multi-scale relation decoder and respective classifier heads."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .episodes import BACKGROUND, IGNORE_LABEL
from .exceptions import ConfigurationError, ShapeError
from .prototypes import mask_to_grid, similarity_map


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple = (32, 64)
    downsample_factor: int = 2
    frozen: bool = True
    contrast_window: int = 7

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if len(self.stage_channels) != 2:
            raise ConfigurationError("encoder.stage_channels", "exactly two stages are required")
        if self.downsample_factor < 1:
            raise ConfigurationError("encoder.downsample_factor", "must be >= 1")
        if self.contrast_window < 1 or self.contrast_window % 2 == 0:
            raise ConfigurationError("encoder.contrast_window", "must be a positive odd integer")

    @property
    def out_channels(self):
        return sum(self.stage_channels)

    @property
    def total_downsample(self):
        return self.downsample_factor ** 2


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    proj_channels: int = 48
    proj_relu: bool = False
    hidden: int = 32
    n_scales: int = 3
    head_hidden: int = 32
    iprm: bool = True
    rcm: bool = True

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        enc = d.pop("encoder", {}) or {}
        if not isinstance(enc, EncoderConfig):
            enc = EncoderConfig(**enc)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError("model", f"unknown fields {sorted(unknown)}")
        return cls(encoder=enc, **d)

    def to_dict(self):
        out = asdict(self)
        out["encoder"]["stage_channels"] = list(self.encoder.stage_channels)
        return out


@dataclass
class RcmOutputs:
    """Softmax maps ``(B, 2, h, w)``; channel 1 is each head's positive class."""

    V1: torch.Tensor | None
    V0: torch.Tensor | None
    Vf: torch.Tensor


def local_contrast_norm(images, window=7, eps=0.05):
    """Subtract the local mean and divide by the local standard deviation, per channel."""
    pad = window // 2
    mean = F.avg_pool2d(images, window, 1, pad, count_include_pad=False)
    centred = images - mean
    var = F.avg_pool2d(centred * centred, window, 1, pad, count_include_pad=False)
    return centred / (var.sqrt() + eps)


def instance_standardize(features, eps=1e-5):
    """Zero mean, unit variance per channel over the spatial grid of each image."""
    mean = features.mean(dim=(-2, -1), keepdim=True)
    var = features.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (features - mean) / (var + eps).sqrt()


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, 1)


class Encoder(nn.Module):
    """Two convolutional stages whose outputs are pooled to one grid and concatenated."""

    def __init__(self, config=EncoderConfig()):
        super().__init__()
        self.config = config
        c1, c2 = config.stage_channels
        d = config.downsample_factor
        self.stage1 = nn.Sequential(conv3x3(3, c1), nn.ReLU(), conv3x3(c1, c1, stride=d), nn.ReLU())
        self.stage2 = nn.Sequential(conv3x3(c1, c2, stride=d), nn.ReLU(), conv3x3(c2, c2), nn.ReLU())
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        if config.frozen:
            self.requires_grad_(False)

    @property
    def total_downsample(self):
        return self.config.total_downsample

    def geometry(self):
        """``(kernel, stride, padding)`` of each spatial operator on the deeper path.

        The contrast normalisation reads a ``window`` neighbourhood twice
        (mean, then variance of the centred values).
        """
        w = self.config.contrast_window
        d = self.config.downsample_factor
        return [(w, 1, w // 2), (w, 1, w // 2), (3, 1, 1), (3, d, 1), (3, d, 1), (3, 1, 1)]

    def forward(self, images):
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        H, W = images.shape[-2:]
        f = self.total_downsample
        if H % f or W % f:
            raise ShapeError(f"image size {(H, W)} must be divisible by {f}")
        low = self.stage1(local_contrast_norm(images, self.config.contrast_window))
        high = self.stage2(low)
        d = self.config.downsample_factor
        low = F.avg_pool2d(low, d) if d > 1 else low
        out = torch.cat([low, high], dim=1)
        return out.squeeze(0) if squeeze else out


def _pool_to(x, size):
    return x if x.shape[-2:] == size else F.adaptive_avg_pool2d(x, size)


def _upsample_to(x, size):
    return x if x.shape[-2:] == size else F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ScaleBlock(nn.Module):
    def __init__(self, channels, receives_previous):
        super().__init__()
        self.merge = conv1x1(2 * channels, channels) if receives_previous else None
        self.body = nn.Sequential(conv3x3(channels, channels), nn.ReLU(), conv3x3(channels, channels), nn.ReLU())
        self.cls = conv1x1(channels, 2)

    def forward(self, x, previous=None):
        if self.merge is not None:
            x = F.relu(self.merge(torch.cat([x, _pool_to(previous, x.shape[-2:])], dim=1)))
        x = x + self.body(x)
        return x, self.cls(x)


class MultiScaleDecoder(nn.Module):
    """Pyramid over the concatenated support/query/similarity input.

    The input is average-pooled to ``n_scales`` resolutions (factor 2 each);
    every scale receives the previous, finer scale's output, emits its own
    two-channel logits, and all scales are upsampled and fused into the
    full-resolution relation feature.
    """

    def __init__(self, feat_channels, hidden=32, n_scales=3):
        super().__init__()
        if n_scales < 1:
            raise ConfigurationError("model.n_scales", "must be >= 1")
        self.n_scales = n_scales
        self.input = nn.Sequential(conv1x1(2 * feat_channels + 2, hidden), nn.ReLU())
        self.scales = nn.ModuleList(ScaleBlock(hidden, s > 0) for s in range(n_scales))
        self.fuse = nn.Sequential(
            conv1x1(hidden * n_scales, hidden), nn.ReLU(), conv3x3(hidden, hidden), nn.ReLU()
        )
        self.out_channels = hidden

    def scale_sizes(self, h, w):
        return [(-(-h // 2 ** s), -(-w // 2 ** s)) for s in range(self.n_scales)]

    def forward(self, support_feat, query_feat, sim_fg, sim_bg):
        squeeze = query_feat.dim() == 3
        if squeeze:
            support_feat, query_feat = support_feat.unsqueeze(0), query_feat.unsqueeze(0)
            sim_fg, sim_bg = sim_fg.unsqueeze(0), sim_bg.unsqueeze(0)
        size = query_feat.shape[-2:]
        for name, t in (("support_feat", support_feat), ("sim_fg", sim_fg), ("sim_bg", sim_bg)):
            if t.shape[-2:] != size:
                raise ShapeError(f"{name} spatial dims {tuple(t.shape[-2:])} != query {tuple(size)}")
        x = torch.cat([support_feat, query_feat, sim_fg.unsqueeze(1), sim_bg.unsqueeze(1)], dim=1)
        base = self.input(x)
        outputs, logits, previous = [], [], None
        for block, s_size in zip(self.scales, self.scale_sizes(*size)):
            out, lg = block(_pool_to(base, s_size), previous)
            outputs.append(out)
            logits.append(lg)
            previous = out
        fused = self.fuse(torch.cat([_upsample_to(o, size) for o in outputs], dim=1))
        if squeeze:
            return fused.squeeze(0), [lg.squeeze(0) for lg in logits]
        return fused, logits


class Head(nn.Module):
    """3x3 conv, ReLU, 1x1 conv to two channels, softmax."""

    def __init__(self, cin, hidden):
        super().__init__()
        self.conv1 = conv3x3(cin, hidden)
        self.conv2 = conv1x1(hidden, 2)

    def forward(self, x):
        return torch.softmax(self.conv2(F.relu(self.conv1(x))), dim=1)


class RespectiveClassifier(nn.Module):
    """Independent target and background heads plus a fusion head over both."""

    def __init__(self, channels, hidden=32):
        super().__init__()
        self.fg = Head(channels, hidden)
        self.bg = Head(channels, hidden)
        self.fusion = Head(channels + 4, hidden)

    def forward(self, relation_feature):
        squeeze = relation_feature.dim() == 3
        x = relation_feature.unsqueeze(0) if squeeze else relation_feature
        V1 = self.fg(x)
        V0 = self.bg(x)
        Vf = self.fusion(torch.cat([V1, V0, x], dim=1))
        if squeeze:
            V1, V0, Vf = V1.squeeze(0), V0.squeeze(0), Vf.squeeze(0)
        return RcmOutputs(V1, V0, Vf)


class SingleClassifier(nn.Module):
    """One head on the relation feature, used when the RCM is ablated."""

    def __init__(self, channels, hidden=32):
        super().__init__()
        self.fusion = Head(channels, hidden)

    def forward(self, relation_feature):
        squeeze = relation_feature.dim() == 3
        x = relation_feature.unsqueeze(0) if squeeze else relation_feature
        Vf = self.fusion(x)
        return RcmOutputs(None, None, Vf.squeeze(0) if squeeze else Vf)


class IPRNet(nn.Module):
    """Prototype-matching few-shot segmenter.

    Frozen encoder features pass through a trainable 1x1 projection; support
    prototypes of the target and background are matched against the query
    by cosine similarity, and the pyramid decoder plus classifier heads turn
    the result into a two-class map.
    """

    def __init__(self, config=ModelConfig()):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.encoder)
        proj = [conv1x1(config.encoder.out_channels, config.proj_channels)]
        if config.proj_relu:
            proj.append(nn.ReLU())
        self.projection = nn.Sequential(*proj)
        self.decoder = MultiScaleDecoder(config.proj_channels, config.hidden, config.n_scales)
        head_cls = RespectiveClassifier if config.rcm else SingleClassifier
        self.classifier = head_cls(self.decoder.out_channels, config.head_hidden)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def encode(self, images):
        if self.config.encoder.frozen:
            with torch.no_grad():
                return self.encoder(images)
        return self.encoder(images)

    def backbone(self, images):
        """Encoder features standardised per image; what the projection consumes."""
        return instance_standardize(self.encode(images))

    def embed(self, backbone_feat):
        return self.projection(backbone_feat)

    def episode_prototypes(self, support_feat, support_masks, targets):
        """Target and background prototypes pooled over the ``k`` shots of each episode.

        ``support_feat`` is ``(B, k, C, h, w)`` and ``support_masks`` holds the
        full multi-class labels ``(B, k, H, W)``.  With the IPRM enabled the
        background prototype pools class-0 pixels only; without it every
        non-target, non-ignored pixel counts as background.
        """
        grid = mask_to_grid(support_masks, support_feat.shape[-2:])
        t = torch.as_tensor(targets, dtype=torch.long).view(-1, 1, 1, 1)
        fg = grid == t
        if self.config.iprm:
            bg = grid == BACKGROUND
        else:
            bg = (grid != t) & (grid != IGNORE_LABEL)
        fg = fg.to(support_feat.dtype).unsqueeze(2)
        bg = bg.to(support_feat.dtype).unsqueeze(2)
        fg_count = fg.sum(dim=(1, 2, 3, 4))
        bg_count = bg.sum(dim=(1, 2, 3, 4))
        fg_proto = (support_feat * fg).sum(dim=(1, 3, 4)) / fg_count.clamp_min(1).unsqueeze(1)
        bg_proto = (support_feat * bg).sum(dim=(1, 3, 4)) / bg_count.clamp_min(1).unsqueeze(1)
        return fg_proto, bg_proto, fg_count

    def forward_features(self, query_feat, support_feat, support_masks, targets):
        """Run everything after the projection on batched embedded features."""
        fg_proto, bg_proto, fg_count = self.episode_prototypes(support_feat, support_masks, targets)
        sim_fg = similarity_map(fg_proto, query_feat)
        sim_bg = similarity_map(bg_proto, query_feat)
        relation, logits = self.decoder(support_feat.mean(dim=1), query_feat, sim_fg, sim_bg)
        outs = self.classifier(relation)
        return {
            "relation": relation,
            "logits": logits,
            "outs": outs,
            "fg_count": fg_count,
        }

    def forward(self, query_images, support_images, support_masks, targets):
        """``query_images (B, 3, H, W)``, ``support_images (B, k, 3, H, W)``."""
        B, k = support_images.shape[:2]
        q = self.embed(self.backbone(query_images))
        s = self.embed(self.backbone(support_images.flatten(0, 1)))
        s = s.view(B, k, *s.shape[1:])
        return self.forward_features(q, s, support_masks, targets)

    def predict_proba(self, query_images, support_images, support_masks, targets):
        """Final-head probabilities upsampled to the query image size."""
        out = self.forward(query_images, support_images, support_masks, targets)
        return _upsample_to(out["outs"].Vf, query_images.shape[-2:])


def parameter_checksum(module_or_params):
    """SHA-256 over the raw bytes of every parameter, in iteration order."""
    params = module_or_params.parameters() if isinstance(module_or_params, nn.Module) else module_or_params
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
