"""Command line entry points: train, evaluate, ablate, export-protos, make-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .episodes import ShapesConfig, generate_shapes_dataset, make_splits, save_dataset
from .exceptions import IPRNetError
from .training import TrainConfig, load_checkpoint, train, write_config

log = logging.getLogger("iprnet")


def _dataset_for(config):
    return config.load_dataset()


def cmd_train(args):
    config = TrainConfig.from_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "config.yaml")
    ckpt = train(config, out)
    print(ckpt)


def cmd_evaluate(args):
    from .evaluation import evaluate

    _, payload = load_checkpoint(args.checkpoint)
    config = payload["train_config"]
    dataset = _dataset_for(config)
    split = replace(config.resolve_split(dataset), split_index=args.split)
    _, test_classes = make_splits(split)
    k = args.shots if args.shots is not None else config.k_shots
    report = evaluate(args.checkpoint, dataset, sorted(test_classes), k, args.episodes, args.seed)
    report.split_index = args.split
    Path(args.out).write_text(report.to_json())
    print(f"mIoU {report.mean_iou:.4f} over {report.episode_count} episodes")


def cmd_ablate(args):
    from .evaluation import run_ablation, write_ablation_csv

    config = TrainConfig.from_file(args.config)
    work = Path(args.work_dir) if args.work_dir else Path(args.out).parent / "ablation_runs"
    splits = [int(s) for s in args.splits.split(",")] if args.splits else None

    def progress(iprm, rcm, split, report):
        print(f"iprm={int(iprm)} rcm={int(rcm)} split={split} mIoU={report.mean_iou:.4f}", flush=True)

    rows = run_ablation(config, work, splits=splits, n_episodes=args.episodes, eval_seed=args.seed,
                        progress=progress)
    write_ablation_csv(rows, args.out)
    print(Path(args.out).read_text(), end="")


def cmd_export_protos(args):
    from .evaluation import prototype_separation

    _, payload = load_checkpoint(args.checkpoint)
    config = payload["train_config"]
    dataset = _dataset_for(config)
    classes = payload["test_classes"] if args.classes == "test" else payload["train_classes"]
    value = prototype_separation(args.checkpoint, dataset, classes, args.episodes, args.seed,
                                 csv_path=args.out)
    print(f"mean interclass cosine {value:.4f}")


def cmd_make_data(args):
    config = ShapesConfig(**(json.loads(args.params) if args.params else {}))
    save_dataset(generate_shapes_dataset(config), args.out)
    print(args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="iprnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mIoU of a checkpoint on the test fold of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", type=int, required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate the IPRM/RCM on-off grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="ablation CSV")
    p.add_argument("--work-dir", help="where per-run checkpoints go")
    p.add_argument("--splits", help="comma separated split indices (default: all)")
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-protos", help="write query prototypes as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", choices=("test", "train"), default="test")
    p.set_defaults(func=cmd_export_protos)

    p = sub.add_parser("make-data", help="render the synthetic shapes dataset to a directory")
    p.add_argument("--out", required=True)
    p.add_argument("--params", help='JSON overrides, e.g. \'{"n_classes": 8}\'')
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except IPRNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
