"""Command-line interface.

Subcommands: phantom, corrupt, normalize, train, predict, dice,
evaluate, run, report, slice. Exit codes: 0 success, 1 validation
error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import io as vio
from .experiment import ExperimentConfig, StageError, run_experiment
from .filters import NoiseSpec, corrupt_dataset
from .metrics import RobustnessMatrix, dice_per_class, evaluate_model
from .phantom import PhantomSpec, generate_cohort
from .report import emit_report, export_slice
from .segmenter import ModelParams, TrainConfig, predict, train
from .volume import VoltexError, normalize_zmuv

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_STAGE_FAILURE = 2


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors instead of exiting with 2."""

    def error(self, message):
        raise CliError(message)


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise CliError(f"expected X,Y,Z, got {text!r}")
    return tuple(parts)


def build_parser() -> _Parser:
    parser = _Parser(prog="voltex", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")
    parser.add_argument("--resume", action="store_true",
                        help="skip run stages whose outputs already verify")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic labeled cohort")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--size", type=_parse_triple, default=(64, 64, 64), metavar="X,Y,Z")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("corrupt", help="apply one corruption to a dataset directory")
    p.add_argument("--filter", required=True,
                   choices=("gaussian", "median", "snp", "identity"))
    p.add_argument("--sigma", type=float)
    p.add_argument("--size", type=int)
    p.add_argument("--prob", type=float)
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("normalize", help="zero-mean/unit-variance normalize one volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the reference segmenter")
    p.add_argument("--config", required=True, help="JSON TrainConfig (datasets, hyperparameters)")
    p.add_argument("--data", required=True, help="root directory holding the named datasets")
    p.add_argument("--out", required=True, help="output model JSON path")

    p = sub.add_parser("predict", help="segment a volume with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dice", help="per-class Dice between two label maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, default=None)

    p = sub.add_parser("evaluate", help="evaluate a model on condition directories")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="root directory holding condition datasets")
    p.add_argument("--conditions", required=True, help="comma-separated condition names")
    p.add_argument("--out", default=None, help="write the matrix JSON here")

    p = sub.add_parser("run", help="run the full corruption/training/evaluation grid")
    p.add_argument("--config", default=None, help="JSON ExperimentConfig (defaults used if omitted)")
    p.add_argument("--out", default=None, help="output root (overrides config)")
    p.add_argument("--cohort", default=None, help="existing cohort directory to reuse")

    p = sub.add_parser("report", help="render a saved matrix as csv or markdown")
    p.add_argument("--matrix", required=True, help="matrix JSON from a run")
    p.add_argument("--format", choices=("csv", "md"), default="md")
    p.add_argument("--out", default=None, help="output file (stdout if omitted)")

    p = sub.add_parser("slice", help="export one slice of a volume or label map as PNG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--axis", choices=("axial", "coronal", "sagittal"), default="axial")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--labels", action="store_true", help="treat the input as a label map")
    p.add_argument("--out", required=True)

    return parser


def _cmd_phantom(args) -> None:
    spec = PhantomSpec(dims=args.size, num_classes=args.classes)
    generate_cohort(args.count, spec, args.seed, args.out)
    print(f"wrote {args.count}-subject cohort to {args.out}")


def _noise_spec_from_args(args) -> NoiseSpec:
    if args.filter == "identity":
        return NoiseSpec.identity()
    if args.filter == "gaussian":
        if args.sigma is None:
            raise CliError("--filter gaussian requires --sigma")
        return NoiseSpec.gaussian(args.sigma)
    if args.filter == "median":
        if args.size is None:
            raise CliError("--filter median requires --size")
        return NoiseSpec.median(args.size)
    if args.prob is None:
        raise CliError("--filter snp requires --prob")
    return NoiseSpec.salt_pepper(args.prob, seed=args.seed)


def _cmd_corrupt(args) -> None:
    spec = _noise_spec_from_args(args)
    count = corrupt_dataset(args.input, spec, args.out)
    print(f"corrupted {count} volumes ({spec.name}) into {args.out}")


def _cmd_normalize(args) -> None:
    vol = vio.load_volume(args.input)
    vio.save_volume(normalize_zmuv(vol), args.out)
    print(f"normalized {args.input} -> {args.out}")


def _cmd_train(args) -> None:
    config = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    model = train(config, args.data)
    model.save(args.out)
    print(f"trained on {list(config.datasets)}; model -> {args.out}")


def _cmd_predict(args) -> None:
    model = ModelParams.load(args.model)
    vol = vio.load_volume(args.input)
    seg = predict(model, vol)
    vio.save_labelmap(seg, args.out)
    print(f"segmented {args.input} -> {args.out}")


def _cmd_dice(args) -> None:
    classes = args.classes
    pred = vio.load_labelmap(args.pred, num_classes=classes)
    if classes is None:
        classes = pred.num_classes
        pred = vio.load_labelmap(args.pred, num_classes=classes)
    gt = vio.load_labelmap(args.gt, num_classes=classes)
    dv = dice_per_class(pred, gt)
    for k, (v, flag) in enumerate(zip(dv.values, dv.flags)):
        suffix = "" if flag == "normal" else f"  ({flag})"
        print(f"class_{k + 1}: {v:.4f}{suffix}")
    print(f"mean: {dv.values.mean():.4f}")


def _cmd_evaluate(args) -> None:
    model = ModelParams.load(args.model)
    dirs = [Path(args.data) / name for name in args.conditions.split(",") if name]
    matrix = evaluate_model(model, dirs)
    if args.out:
        matrix.save(args.out)
        print(f"matrix -> {args.out}")
    else:
        print(emit_report(matrix, "csv"), end="")


def _cmd_run(args) -> None:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.output = args.out
    if args.cohort:
        cfg.cohort_path = args.cohort
    cfg.jobs = args.jobs
    cfg.resume = args.resume
    matrix = run_experiment(cfg)
    print(f"completed {len(matrix.models)}x{len(matrix.conditions)} grid -> {cfg.output}")


def _cmd_report(args) -> None:
    matrix = RobustnessMatrix.load(args.matrix)
    text = emit_report(matrix, args.format)
    if args.out:
        Path(args.out).write_text(text)
        print(f"report -> {args.out}")
    else:
        print(text, end="")


def _cmd_slice(args) -> None:
    if args.labels:
        obj = vio.load_labelmap(args.input)
    else:
        obj = vio.load_volume(args.input)
    export_slice(obj, args.axis, args.index, args.out)
    print(f"slice -> {args.out}")


_COMMANDS = {
    "phantom": _cmd_phantom,
    "corrupt": _cmd_corrupt,
    "normalize": _cmd_normalize,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "dice": _cmd_dice,
    "evaluate": _cmd_evaluate,
    "run": _cmd_run,
    "report": _cmd_report,
    "slice": _cmd_slice,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    try:
        _COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (VoltexError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
