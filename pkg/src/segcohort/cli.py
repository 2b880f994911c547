"""Command-line entry point: gen-data, train, eval, plot, ablate.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from segcohort.config import apply_overrides, load_config
from segcohort.models import ConfigError

logger = logging.getLogger("segcohort")


def _add_gen_data(subparsers) -> None:
    p = subparsers.add_parser("gen-data", help="generate a synthetic shapes dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image height and width")
    p.add_argument("--classes", type=int, default=4, help="number of classes incl. background")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")


def _add_train(subparsers) -> None:
    p = subparsers.add_parser("train", help="train the cohort; writes a self-describing run directory")
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--data", type=Path, default=None, help="training dataset directory")
    p.add_argument("--val", type=Path, default=None, help="validation dataset directory")
    p.add_argument("--ratio", type=str, default=None, help="labeled fraction, e.g. 1/8")
    p.add_argument("--mode", choices=["supervised", "cross", "tcc"], default=None,
                   help="supervised = labeled loss only; cross adds prediction distillation; tcc adds feature consistency")
    p.add_argument("--cutmix", action="store_true", help="box-mix unlabeled pairs and their targets")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="continue from the run directory's last checkpoint")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override any config key")


def _add_eval(subparsers) -> None:
    p = subparsers.add_parser("eval", help="evaluate a checkpoint on a dataset at a single scale")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", choices=["all", "labeled", "unlabeled"], default="all")
    p.add_argument("--partition", type=Path, default=None, help="partition file, required for labeled/unlabeled splits")
    p.add_argument("--out", type=Path, default=None, help="report file (default: report.txt next to the checkpoint)")


def _add_plot(subparsers) -> None:
    p = subparsers.add_parser("plot", help="render loss/miou figures from metrics CSVs")
    p.add_argument("csvs", type=Path, nargs="+", help="one or more metrics.csv files; several overlay")
    p.add_argument("--out", type=Path, required=True, help="directory for the image files")


def _add_ablate(subparsers) -> None:
    p = subparsers.add_parser("ablate", help="sweep loss combinations across label ratios and seeds")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="sweep directory (cells + table)")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--val", type=Path, default=None)
    p.add_argument("--ratios", type=str, default="1/8", help="comma-separated, e.g. 1/16,1/8")
    p.add_argument("--seeds", type=str, default="0,1,2", help="comma-separated seed list")
    p.add_argument("--workers", type=int, default=1, help="parallel cell subprocesses")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segcohort", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(subparsers)
    _add_train(subparsers)
    _add_eval(subparsers)
    _add_plot(subparsers)
    _add_ablate(subparsers)
    return parser


def cmd_gen_data(args) -> int:
    from segcohort.data import generate_shapes_dataset, save_dataset

    if args.classes < 2:
        raise ConfigError(f"--classes must be at least 2, got {args.classes}")
    if args.out.exists() and any(args.out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {args.out} is not empty (use --force to overwrite)")
    samples = generate_shapes_dataset(args.n, args.size, args.size, args.classes, args.seed)
    save_dataset(samples, args.out, args.classes, args.seed)
    logger.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def _resolve_train_config(args):
    config = load_config(args.config)
    if args.data is not None:
        config.data.train_dir = str(args.data)
    if args.val is not None:
        config.data.val_dir = str(args.val)
    if getattr(args, "ratio", None) is not None:
        config.data.label_ratio = str(Fraction(args.ratio))
    if getattr(args, "mode", None) is not None:
        from segcohort.ablation import apply_mode

        apply_mode(config, args.mode)
    if getattr(args, "cutmix", False):
        config.data.cutmix = True
    if getattr(args, "seed", None) is not None:
        config.training.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        config.training.iterations = args.iterations
    apply_overrides(config, args.overrides)
    config.validate()
    return config


def cmd_train(args) -> int:
    from segcohort.training import train

    config = _resolve_train_config(args)
    report = train(config, args.out, resume=args.resume)
    logger.info("run complete: val mIoU cnn %s vit %s", report.get("miou_cnn"), report.get("miou_vit"))
    return 0


def cmd_eval(args) -> int:
    from segcohort.data import load_dataset, load_partition
    from segcohort.evaluation import evaluate_pair
    from segcohort.training import load_checkpoint, write_report

    if not args.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    samples, _ = load_dataset(args.dataset)
    if args.split != "all":
        if args.partition is None:
            raise ConfigError("--partition is required for labeled/unlabeled splits")
        labeled, unlabeled = load_partition(args.partition)
        wanted = set(labeled if args.split == "labeled" else unlabeled)
        samples = [s for s in samples if s.id in wanted]
        if not samples:
            raise ConfigError(f"split {args.split!r} selects no samples")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    result = evaluate_pair(state.cnn, state.vit, images, masks)
    out = args.out or args.checkpoint.parent / "report.txt"
    write_report(
        Path(out),
        {
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "split": args.split,
            "iteration": state.iteration,
            "images": len(samples),
            "miou_cnn": result["miou_cnn"],
            "miou_vit": result["miou_vit"],
            "pixel_acc_cnn": result["pixel_acc_cnn"],
            "pixel_acc_vit": result["pixel_acc_vit"],
            "per_class_iou_cnn": ",".join(f"{v:.6f}" for v in result["per_class_cnn"]),
            "per_class_iou_vit": ",".join(f"{v:.6f}" for v in result["per_class_vit"]),
            "note": "classes with zero union are excluded from miou",
        },
    )
    logger.info("report written to %s", out)
    print(f"miou_cnn: {result['miou_cnn']:.6f}")
    print(f"miou_vit: {result['miou_vit']:.6f}")
    return 0


def cmd_plot(args) -> int:
    from segcohort.plotting import render_figures

    for path in args.csvs:
        if not path.is_file():
            raise ConfigError(f"metrics file not found: {path}")
    try:
        written = render_figures(list(args.csvs), args.out)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    for path in written:
        logger.info("wrote %s", path)
    return 0


def cmd_ablate(args) -> int:
    from segcohort.ablation import run_ablation

    config = _resolve_train_config(args)
    ratios = [Fraction(r) for r in args.ratios.split(",") if r]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not ratios or not seeds:
        raise ConfigError("--ratios and --seeds must be non-empty")
    table = run_ablation(config, args.out, ratios, seeds, workers=args.workers)
    print(table.read_text())
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports and exits
        logger.exception("command failed")
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
