"""IoU evaluation over sampled test episodes, the IPRM/RCM ablation grid and prototype separation."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .episodes import IGNORE_LABEL, EpisodeSampler
from .exceptions import CheckpointMismatchError, DomainError, IPRNetDiagnostic, ShapeError
from .model import IPRNet, parameter_checksum
from .prototypes import Prototype, masked_average_pool, relation_loss, write_prototype_csv

ABLATION_GRID = ((True, True), (True, False), (False, True), (False, False))


def binary_iou(pred, gt, positive=1):
    """IoU of the ``positive`` label, counting only positions where ``gt != 255``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = gt != IGNORE_LABEL
    p = (pred == positive) & valid
    g = (gt == positive) & valid
    union = int(np.count_nonzero(p | g))
    if union == 0:
        warnings.warn("empty union, IoU defined as 1", IPRNetDiagnostic, stacklevel=2)
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def intersection_union(pred, gt, positive=1):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    valid = gt != IGNORE_LABEL
    p = (pred == positive) & valid
    g = (gt == positive) & valid
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


@dataclass
class IoUReport:
    per_class: dict
    mean_iou: float
    episode_count: int
    split_index: int | None = None

    def to_json(self):
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in sorted(self.per_class.items())}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["per_class"] = {int(k): v for k, v in d["per_class"].items()}
        return cls(**d)


@dataclass
class IoUAccumulator:
    """Per-class intersection and union counts summed over episodes."""

    intersection: dict = field(default_factory=dict)
    union: dict = field(default_factory=dict)
    episodes: int = 0

    def add(self, class_id, pred, gt):
        i, u = intersection_union(pred, gt)
        self.intersection[class_id] = self.intersection.get(class_id, 0) + i
        self.union[class_id] = self.union.get(class_id, 0) + u
        self.episodes += 1

    def merge(self, other):
        out = IoUAccumulator(dict(self.intersection), dict(self.union), self.episodes + other.episodes)
        for c in other.union:
            out.intersection[c] = out.intersection.get(c, 0) + other.intersection[c]
            out.union[c] = out.union.get(c, 0) + other.union[c]
        return out

    def report(self, split_index=None):
        per_class = {}
        for c in sorted(self.union):
            u = self.union[c]
            per_class[c] = self.intersection[c] / u if u else 1.0
        mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return IoUReport(per_class, mean, self.episodes, split_index)


def predict_episodes(model, episodes, feature_cache=None):
    """Binary predictions ``(B, H, W)``: argmax of the final head at image resolution."""
    from .training import episode_tensors, raw_features

    model.eval()
    with torch.no_grad():
        _, support_masks, targets = episode_tensors(episodes)
        q_raw, s_raw = raw_features(model, episodes, feature_cache)
        q = model.embed(q_raw)
        B, k = s_raw.shape[:2]
        s = model.embed(s_raw.flatten(0, 1)).view(B, k, -1, *s_raw.shape[-2:])
        Vf = model.forward_features(q, s, support_masks, targets)["outs"].Vf
        size = episodes[0].query_mask.shape[-2:]
        Vf = torch.nn.functional.interpolate(Vf, size=size, mode="bilinear", align_corners=False)
        return Vf.argmax(dim=1).to(torch.uint8).numpy()


def evaluate_predictor(predict, dataset, test_classes, k, n_episodes, seed=0, batch_size=50, split_index=None):
    """Score ``predict(list_of_episodes) -> (B, H, W)`` on ``n_episodes`` sampled test episodes."""
    sampler = EpisodeSampler(dataset, test_classes, k, seed=seed)
    acc = IoUAccumulator()
    remaining = n_episodes
    while remaining > 0:
        batch = sampler.sample_batch(min(batch_size, remaining))
        preds = predict(batch)
        for ep, pred in zip(batch, preds):
            acc.add(ep.target_class, pred, ep.query_mask)
        remaining -= len(batch)
    return acc.report(split_index)


def evaluate_model(model, dataset, test_classes, k, n_episodes, seed=0, feature_cache=None, split_index=None):
    """Like :func:`evaluate_predictor` for an :class:`IPRNet`; frozen encoder features are cached."""
    if feature_cache is None and isinstance(model, IPRNet) and model.config.encoder.frozen:
        from .training import encode_dataset

        feature_cache = encode_dataset(model, dataset)
    return evaluate_predictor(
        lambda batch: predict_episodes(model, batch, feature_cache),
        dataset, test_classes, k, n_episodes, seed, split_index=split_index,
    )


def _load(checkpoint):
    from .training import load_checkpoint

    if isinstance(checkpoint, torch.nn.Module):
        return checkpoint, {}
    return load_checkpoint(checkpoint)


def evaluate(checkpoint, dataset, test_classes, k, n_episodes, seed=0):
    """Evaluate a checkpoint on held-out classes; refuses classes it was trained on."""
    model, payload = _load(checkpoint)
    trained_on = set(payload.get("train_classes", ()))
    overlap = trained_on & set(test_classes)
    if overlap:
        raise CheckpointMismatchError(
            f"test classes {sorted(overlap)} were training classes of this checkpoint"
        )
    before = parameter_checksum(model)
    split_index = payload["train_config"].split.split_index if payload else None
    report = evaluate_model(model, dataset, test_classes, k, n_episodes, seed, split_index=split_index)
    assert parameter_checksum(model) == before
    return report


@dataclass
class AblationRow:
    iprm_on: bool
    rcm_on: bool
    per_split_miou: list
    checkpoints: list = field(default_factory=list, repr=False)

    @property
    def mean(self):
        return float(np.mean(self.per_split_miou))


def ablation_config(base_config, iprm, rcm, split_index):
    """Variant of ``base_config`` with the IPRM and/or RCM switched off."""
    weights = base_config.weights if iprm else replace(base_config.weights, w1=0.0)
    model = replace(base_config.model, iprm=iprm, rcm=rcm)
    split = replace(base_config.split, split_index=split_index)
    return replace(base_config, weights=weights, model=model, split=split)


def run_ablation(base_config, out_dir, toggles=ABLATION_GRID, splits=None, n_episodes=500,
                 eval_seed=0, dataset=None, progress=None):
    """Train and evaluate every on/off combination on every split.

    Evaluation of split ``i`` always uses seed ``eval_seed + i`` so all
    variants see the same test episodes.
    """
    from .training import train

    out_dir = Path(out_dir)
    if dataset is None:
        dataset = base_config.load_dataset()
    split = base_config.resolve_split(dataset)
    base_config = replace(base_config, split=split)
    if splits is None:
        splits = range(split.n_splits)
    rows = []
    for iprm, rcm in toggles:
        row = AblationRow(iprm, rcm, [])
        for s in splits:
            cfg = ablation_config(base_config, iprm, rcm, s)
            run_dir = out_dir / f"iprm{int(iprm)}_rcm{int(rcm)}" / f"split{s}"
            ckpt = train(cfg, run_dir, dataset=dataset)
            model, payload = _load(ckpt)
            test_classes = payload["test_classes"]
            report = evaluate_model(model, dataset, test_classes, cfg.k_shots, n_episodes,
                                    seed=eval_seed + s, split_index=s)
            (run_dir / "report.json").write_text(report.to_json())
            row.per_split_miou.append(report.mean_iou)
            row.checkpoints.append(ckpt)
            if progress is not None:
                progress(iprm, rcm, s, report)
        rows.append(row)
    return rows


def write_ablation_csv(rows, path):
    n = max(len(r.per_split_miou) for r in rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iprm", "rcm"] + [f"s{i}" for i in range(n)] + ["mean"])
        for r in rows:
            writer.writerow([int(r.iprm_on), int(r.rcm_on)] + [f"{v:.6f}" for v in r.per_split_miou]
                            + [f"{r.mean:.6f}"])
    return path


def query_prototypes(model, dataset, classes, n_episodes, seed=0, k=1):
    """Target-class prototypes of sampled query images, pooled with their ground-truth masks."""
    sampler = EpisodeSampler(dataset, classes, k, seed=seed)
    rows = []
    model.eval()
    with torch.no_grad():
        for episode_id in range(n_episodes):
            ep = sampler.sample()
            feat = model.embed(model.backbone(torch.from_numpy(np.array(ep.query_image))[None]))[0]
            try:
                proto = masked_average_pool(feat.double(), ep.query_mask, 1)
            except Exception as exc:  # target vanished on the grid
                warnings.warn(f"episode {episode_id}: {exc}", IPRNetDiagnostic)
                continue
            rows.append((episode_id, Prototype(proto.vector, ep.target_class, proto.pixel_count)))
    return rows


def class_mean_prototypes(rows):
    by_class = {}
    for _, p in rows:
        by_class.setdefault(p.class_id, []).append(p)
    return {
        c: Prototype(torch.stack([p.vector for p in ps]).mean(0), c, sum(p.pixel_count for p in ps))
        for c, ps in sorted(by_class.items())
    }


def prototype_separation(checkpoint, dataset, classes, n_episodes, seed=0, csv_path=None):
    """Mean pairwise cosine similarity between per-class mean query prototypes.

    Lower means better separated classes.  Per-episode prototypes are
    written to ``csv_path`` when given.
    """
    if len(set(classes)) < 2:
        raise DomainError("prototype separation needs at least two classes")
    model, _ = _load(checkpoint)
    rows = query_prototypes(model, dataset, classes, n_episodes, seed)
    if csv_path is not None:
        write_prototype_csv(rows, csv_path)
    means = class_mean_prototypes(rows)
    if len(means) < 2:
        raise DomainError("fewer than two classes produced prototypes")
    return float(relation_loss(means))
