"""Command-line entry point: split, summary, train, evaluate, explain.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DataError, DatasetIndex, SplitSpec, format_split_table, split_folders
from .gradcam import render_cases
from .metrics import classification_report, confusion_matrix, format_confusion_matrix
from .model import CheckpointError, build_slim_cnn, load_checkpoint
from .training import TrainingDiverged, evaluate, fit, init_weights


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slimcnn", description="Slim CNN training and Grad-CAM explanations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("split", help="split class folders into train/val/test")
    s.add_argument("--src", required=True, type=Path)
    s.add_argument("--dst", required=True, type=Path)
    s.add_argument("--seed", type=int, default=888)
    s.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))

    sub.add_parser("summary", help="print the slim CNN layer table")

    t = sub.add_parser("train", help="train on DATA/train, validate on DATA/val")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint directory")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seed", type=int, default=888)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--image-size", type=int, nargs=2, default=(128, 128), metavar=("H", "W"))
    t.add_argument("--filters", type=int, nargs=3, default=(128, 256, 256))
    t.add_argument("--dense", type=int, default=256, help="hidden dense units")
    t.add_argument("--padding", type=int, default=0, help="conv padding on each side")

    e = sub.add_parser("evaluate", help="confusion matrix and report on DATA/test")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--batch", type=int, default=32)
    e.add_argument("--report-csv", type=Path, help="also write the report as CSV")

    x = sub.add_parser("explain", help="render Grad-CAM explanations")
    x.add_argument("--ckpt", required=True, type=Path)
    src = x.add_mutually_exclusive_group(required=True)
    src.add_argument("--cases", nargs="+", type=Path)
    src.add_argument("--data", type=Path)
    x.add_argument("--m", type=int, default=4, help="number of sampled cases")
    x.add_argument("--alpha", type=float, default=0.4)
    x.add_argument("--seed", type=int, default=888)
    x.add_argument("--layer", default="lastConv", help="convolution layer to explain")
    x.add_argument("--out", required=True, type=Path)
    return p


def _split(args) -> None:
    try:
        spec = SplitSpec(tuple(args.ratios), args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    counts = split_folders(args.src, args.dst, spec)
    print(format_split_table(counts))


def _train(args) -> None:
    if args.epochs < 0 or args.batch < 1:
        raise UsageError("--epochs must be >= 0 and --batch >= 1")
    size = tuple(args.image_size)
    train = DatasetIndex.from_directory(args.data / "train", size)
    val = DatasetIndex.from_directory(args.data / "val", size, classes=train.classes)
    model = build_slim_cnn((*size, 1), tuple(args.filters), args.dense, len(train.classes),
                           (args.padding, args.padding), classes=train.classes)
    init_weights(model, args.seed)
    history = fit(model, train, val, args.epochs, args.seed, args.out, args.batch, args.lr)
    if len(history):
        print(f"epochs {len(history)}  train_loss {history.train_loss[-1]:.4f}  "
              f"train_acc {history.train_acc[-1]:.4f}  val_loss {history.val_loss[-1]:.4f}  "
              f"val_acc {history.val_acc[-1]:.4f}")
    print(f"checkpoints and history.csv written to {args.out}")


def _evaluate(args) -> None:
    model = load_checkpoint(args.ckpt)
    test = DatasetIndex.from_directory(args.data / "test", model.input_shape[:2], classes=model.classes)
    names = test.classes
    _, _, preds = evaluate(model, test, args.batch)
    cm = confusion_matrix(test.labels, preds, len(names))
    report = classification_report(cm, names)
    print(format_confusion_matrix(cm, names))
    print()
    print(report.to_text())
    if args.report_csv:
        args.report_csv.write_text(report.to_csv())


def _explain(args) -> None:
    if args.m < 1 or args.alpha < 0:
        raise UsageError("--m must be >= 1 and --alpha >= 0")
    model = load_checkpoint(args.ckpt)
    for p in args.cases or []:
        if not p.is_file():
            raise FileNotFoundError(f"case image not found: {p}")
    _, results = render_cases(model, args.cases, args.data, args.m, args.seed, args.alpha,
                              args.layer, args.out)
    for r in results:
        print(f"{r.path}: predicted {r.predicted_name}, true {r.true_name or '?'}")
    print(f"wrote {len(results)} case images and cases_grid.png to {args.out}")


COMMANDS = {
    "split": _split,
    "summary": lambda args: print(build_slim_cnn().summary()),
    "train": _train,
    "evaluate": _evaluate,
    "explain": _explain,
}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        for attr in ("src", "data", "ckpt"):
            path = getattr(args, attr, None)
            if path is not None and not path.exists():
                raise FileNotFoundError(f"--{attr}: {path} does not exist")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, DataError, CheckpointError, TrainingDiverged, ValueError, KeyError) as exc:
        print(f"slimcnn: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
