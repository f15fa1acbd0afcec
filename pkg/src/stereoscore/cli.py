"""Command-line entry point: ``stereoscore <subcommand> [flags]``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
errors (bad images, manifests, checkpoints, non-finite training).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .autodiff import SgdConfig
from .data import generate_synthetic, load_manifest, read_split, write_mismatch_csv
from .errors import ConfigError, StereoScoreError
from .model import PATCH_SIZE, ScoreQuad

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SEED_ENV = "STEREOSCORE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _size(text: str):
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like WxH, got {text!r}")
    w, h = int(m.group(1)), int(m.group(2))
    if w < PATCH_SIZE or h < PATCH_SIZE:
        raise argparse.ArgumentTypeError(f"size {w}x{h} is below the {PATCH_SIZE}x{PATCH_SIZE} patch size")
    return w, h


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return v


def _add_training_flags(p: argparse.ArgumentParser, seed: int) -> None:
    d = SgdConfig()
    p.add_argument("--epochs", type=_nonneg, required=True, help="training epochs (required)")
    p.add_argument("--seed", type=int, default=seed, help=f"init/shuffle seed; falls back to ${SEED_ENV} (default: %(default)s)")
    p.add_argument("--ablation", choices=harness.ABLATION_MODES, default="full", help="loss variant (default: %(default)s)")
    p.add_argument("--lr", type=float, default=d.learning_rate, help="learning rate (default: %(default)s)")
    p.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum (default: %(default)s)")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="weight decay (default: %(default)s)")
    p.add_argument("--batch-size", type=_positive, default=d.batch_size, help="mini-batch size (default: %(default)s)")
    p.add_argument("--lr-step-epochs", type=_nonneg, default=0, help="decay lr every N epochs, 0 disables (default: %(default)s)")
    p.add_argument("--lr-step-gamma", type=float, default=0.1, help="step-decay factor (default: %(default)s)")
    p.add_argument("--threads", type=_positive, default=1, help="evaluation threads (default: %(default)s)")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    parser = _Parser(prog="stereoscore", description="Multi-score stereoscopic image quality assessment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic stereo dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--scenes", type=_positive, default=6, help="reference scenes")
    p.add_argument("--levels", type=_positive, default=3, help="distortion levels including level 0")
    p.add_argument("--size", type=_size, default=(96, 96), metavar="WxH", help="image size")
    p.add_argument("--seed", type=int, default=seed, help=f"generator seed; falls back to ${SEED_ENV}")
    p.add_argument("--name", default=None, help="dataset name used in ids (default: synth<seed>)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="train and evaluate over scene-disjoint splits")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest CSV")
    p.add_argument("--fraction", type=float, choices=harness.PARTITIONS, default=0.8,
                   help="training fraction of reference scenes (default: %(default)s)")
    p.add_argument("--repeats", type=_positive, default=1, help="random split repeats (default: %(default)s)")
    _add_training_flags(p, seed)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, help="MSQA checkpoint")
    p.add_argument("--predictions", type=Path,
                   help="CSV with columns id,score used instead of a checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest CSV")
    p.add_argument("--split", type=Path, help="split CSV; only its test rows are scored")
    p.add_argument("--ablation", choices=harness.ABLATION_MODES, default="full",
                   help="selects the reported score (default: %(default)s)")
    p.add_argument("--threads", type=_positive, default=1, help="evaluation threads (default: %(default)s)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("crossdb", help="train on one database, test on another")
    p.add_argument("--train-manifest", type=Path, required=True, help="training manifest CSV")
    p.add_argument("--test-manifest", type=Path, required=True, help="test manifest CSV")
    _add_training_flags(p, seed)

    p = sub.add_parser("score", help="score one stereo pair")
    p.add_argument("--checkpoint", type=Path, required=True, help="MSQA checkpoint")
    p.add_argument("--left", type=Path, required=True, help="left view (binary PPM)")
    p.add_argument("--right", type=Path, required=True, help="right view (binary PPM)")
    p.add_argument("--json", action="store_true", help="print one key-sorted JSON line")

    p = sub.add_parser("analyze", help="write per-image stereo MOS mismatch data")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest CSV")
    p.add_argument("--out", type=Path, required=True, help="output CSV")
    return parser


def _train_config(args) -> harness.TrainConfig:
    try:
        sgd = SgdConfig(args.lr, args.momentum, args.weight_decay, args.batch_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return harness.TrainConfig(epochs=args.epochs, sgd=sgd, seed=args.seed, ablation_mode=args.ablation,
                               lr_step_epochs=args.lr_step_epochs, lr_step_gamma=args.lr_step_gamma)


def _progress(epoch: int, loss: float) -> None:
    print(f"epoch {epoch}: mean loss {loss:.4f}", file=sys.stderr, flush=True)


def _cmd_synth(args) -> int:
    w, h = args.size
    try:
        m = generate_synthetic(args.out, args.scenes, args.levels, w, h, args.seed, args.name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"wrote {len(m.samples)} stereo pairs from {len(m.reference_ids)} scenes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _train_config(args)
    manifest = load_manifest(args.manifest)
    report = harness.run_protocol(manifest, args.fraction, args.repeats, config, args.out,
                                  threads=args.threads, progress=_progress if args.verbose else None)
    print(report.table())
    return EXIT_OK


def _stub_scorer(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "score"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: predictions CSV needs columns id,score")
        table = {row["id"]: float(row["score"]) for row in reader}

    def scorer(sample):
        if sample.id not in table:
            raise ConfigError(f"{path}: no prediction for sample {sample.id}")
        v = table[sample.id]
        return ScoreQuad(v, v, v, v)
    return scorer


def _cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("eval: give exactly one of --checkpoint or --predictions")
    manifest = load_manifest(args.manifest)
    split = read_split(args.split, manifest) if args.split else None
    scorer = _stub_scorer(args.predictions) if args.predictions else None
    report = harness.evaluate(args.checkpoint, manifest, split, args.ablation, scorer=scorer, threads=args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "report.csv")
    print(report.table())
    return EXIT_OK


def _cmd_crossdb(args) -> int:
    if args.train_manifest.resolve() == args.test_manifest.resolve():
        raise ConfigError(f"refusing cross-database test of {args.train_manifest} against itself")
    config = _train_config(args)
    train_m, test_m = load_manifest(args.train_manifest), load_manifest(args.test_manifest)
    report = harness.cross_database(train_m, test_m, config, args.out, threads=args.threads,
                                    progress=_progress if args.verbose else None)
    report.write_csv(args.out / "report.csv")
    print(report.table())
    return EXIT_OK


def _cmd_score(args) -> int:
    quad, n = harness.score_image(args.checkpoint, args.left, args.right)
    if args.json:
        print(json.dumps({**quad.as_dict(), "patches": n}, sort_keys=True, separators=(",", ":")))
    else:
        for k, v in quad.as_dict().items():
            print(f"{k}: {v:.6f}")
        print(f"patches: {n}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    rows = write_mismatch_csv(args.out, manifest.samples)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "crossdb": _cmd_crossdb,
    "score": _cmd_score,
    "analyze": _cmd_analyze,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StereoScoreError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
