"""Command-line interface: dataset generation, training, evaluation,
run comparison, and report/figure emission.

Exit codes: 0 success, 2 invalid flags or config, 3 I/O failure,
4 dataset incompatible with the requested model, 5 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as M
from . import nn, report, scenegen, train

EXIT_BAD_FLAGS = 2
EXIT_IO = 3
EXIT_DATASET = 4
EXIT_CHECKPOINT = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise CliError(f"--size must look like 96x128, got {text!r}", EXIT_BAD_FLAGS) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intrinseg",
        description=(
            "Joint intrinsic image decomposition and semantic segmentation "
            "at desk scale. Config precedence: CLI flag > config file > "
            "built-in default."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--scenes", type=int, default=40, help="number of scenes (default 40)")
    gen.add_argument("--rigs", type=int, default=5, help="light rigs per scene (default 5)")
    gen.add_argument("--classes", type=int, default=8, help="number of classes (default 8)")
    gen.add_argument("--size", default="96x128", help="canvas HxW (default 96x128)")
    gen.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    gen.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train", help="train one experiment configuration")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--experiment", help="one of: " + ", ".join(train.EXPERIMENTS))
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--epochs", type=int, help="training epochs")
    tr.add_argument("--seed", type=int, help="run seed")
    tr.add_argument("--batch-size", type=int, help="mini-batch size (>= 2)")
    tr.add_argument("--w", type=float, help="joint-loss intrinsic multiplier")
    tr.add_argument("--lr", type=float, help="Adadelta learning rate (default 0.01)")
    tr.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    tr.add_argument(
        "--sweep-w",
        nargs="?",
        const=",".join(str(v) for v in train.SWEEP_W_VALUES),
        metavar="W1,W2,...",
        help="run the joint model once per w value and emit a sweep table",
    )

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", help="ISNN1 checkpoint file")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--split", choices=("train", "test"), default="test", help="split (default test)")
    ev.add_argument("--out", default="eval", help="report output directory (default ./eval)")
    ev.add_argument(
        "--oracle",
        action="store_true",
        help="ground-truth passthrough instead of a checkpoint (perfect scores)",
    )

    cp = sub.add_parser("compare", help="side-by-side metric table over runs")
    cp.add_argument("--runs", required=True, help="comma-separated run directories")
    cp.add_argument("--out", help="directory for the table and confusion CSVs")

    rp = sub.add_parser("report", help="emit text/delimited report and figures for a run")
    rp.add_argument("--run", required=True, help="run directory")
    rp.add_argument("--out", help="output directory (default: the run directory)")
    rp.add_argument("--plots", action="store_true", help="also render PNG figures")
    return parser


def cmd_gen_data(args) -> int:
    canvas = _parse_size(args.size)
    if args.scenes < 2:
        raise CliError("--scenes must be >= 2 so a scene split exists", EXIT_BAD_FLAGS)
    try:
        manifest = scenegen.generate_dataset(
            num_scenes=args.scenes,
            rigs_per_scene=args.rigs,
            out_path=args.out,
            master_seed=args.seed,
            num_classes=args.classes,
            canvas=canvas,
        )
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_IO) from exc
    n_train = len(manifest.entries_for("train"))
    n_test = len(manifest.entries_for("test"))
    print(f"wrote {manifest.num_samples} samples to {args.out} "
          f"({n_train} train / {n_test} test, scene split)")
    return 0


def _build_config(args) -> train.TrainConfig:
    text = ""
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}", EXIT_BAD_FLAGS)
        text = path.read_text()
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}", EXIT_BAD_FLAGS)
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key, value in (
        ("experiment", args.experiment),
        ("epochs", args.epochs),
        ("seed", args.seed),
        ("batch_size", args.batch_size),
        ("w", args.w),
        ("lr", args.lr),
    ):
        if value is not None:
            overrides[key] = str(value)
    try:
        return train.TrainConfig.from_kv(text, overrides)
    except train.ConfigError as exc:
        raise CliError(str(exc), EXIT_BAD_FLAGS) from exc


def cmd_train(args) -> int:
    config = _build_config(args)
    def log(line):
        print(line)
    try:
        if args.sweep_w:
            values = [float(v) for v in args.sweep_w.split(",") if v]
            train.sweep_w(config, args.data, args.out, values=values, log=log)
            print(f"sweep table written to {Path(args.out) / 'sweep_w.tsv'}")
        else:
            record = train.run_experiment(config, args.data, args.out, log=log)
            print(f"run record written to {record.out_dir}")
    except train.DatasetCompatibilityError as exc:
        raise CliError(str(exc), EXIT_DATASET) from exc
    except FileNotFoundError as exc:
        raise CliError(f"dataset not found: {exc}", EXIT_DATASET) from exc
    return 0


def cmd_eval(args) -> int:
    try:
        manifest, samples = scenegen.load_dataset(args.data)
    except (FileNotFoundError, scenegen.ContainerFormatError) as exc:
        raise CliError(f"cannot load dataset: {exc}", EXIT_DATASET) from exc
    chosen = [
        s for s, e in zip(samples, manifest.entries) if e.split == args.split
    ]
    if not chosen:
        raise CliError(f"split {args.split!r} is empty", EXIT_DATASET)

    if args.oracle:
        predictions = [
            {
                "reflectance": s.reflectance.data.astype(np.float64),
                "shading": s.shading.data.astype(np.float64),
                "labels": s.labels.data,
            }
            for s in chosen
        ]
        truths = predictions
        rep = M.evaluate(
            predictions,
            truths,
            num_classes=manifest.num_classes,
            class_names=manifest.class_names,
            lmse_window=min(M.DEFAULT_LMSE_WINDOW, manifest.height, manifest.width),
        )
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --oracle is given", EXIT_BAD_FLAGS)
        try:
            state = nn.load_checkpoint(args.checkpoint)
        except (nn.CheckpointFormatError, FileNotFoundError) as exc:
            raise CliError(str(exc), EXIT_CHECKPOINT) from exc
        if state.spec.num_classes != manifest.num_classes:
            raise CliError(
                f"checkpoint has {state.spec.num_classes} classes, "
                f"dataset has {manifest.num_classes}",
                EXIT_CHECKPOINT,
            )
        experiment = _experiment_for_spec(state.spec)
        data = train.SplitArrays(chosen, experiment, manifest.num_classes)
        try:
            state.spec.check_resolution(manifest.height, manifest.width)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_CHECKPOINT) from exc
        rep = train.evaluate_state(state, data, manifest)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.kv").write_text(rep.to_kv())
        (out / "eval.txt").write_text(rep.to_text())
        if rep.confusion_matrix is not None:
            rep.confusion_matrix.to_csv(out / "confusion.csv", rep.class_names)
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_IO) from exc
    print(rep.to_text(), end="")
    print(f"report files written to {out}")
    return 0


def _experiment_for_spec(spec: nn.NetworkSpec) -> str:
    if spec.input_channels == 4:
        return "cascade_seg_to_intrinsics"
    # RGB-input evaluation; albedo-input cascades are evaluated through
    # the run record of the training command that produced them
    return "single_segmentation" if spec.heads == ("segmentation",) else "single_intrinsics"


def cmd_compare(args) -> int:
    run_dirs = [Path(p) for p in args.runs.split(",") if p]
    for d in run_dirs:
        if not (d / "record.kv").exists():
            raise CliError(f"{d} is not a run directory (no record.kv)", EXIT_BAD_FLAGS)
    try:
        table, _ = report.compare_runs(run_dirs)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_FLAGS) from exc
    print(table, end="")
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "compare.tsv").write_text(table)
            for d in run_dirs:
                src = d / "confusion.csv"
                if src.exists():
                    shutil.copyfile(src, out / f"confusion_{d.name}.csv")
        except OSError as exc:
            raise CliError(f"cannot write comparison: {exc}", EXIT_IO) from exc
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    if not (run_dir / "record.kv").exists():
        raise CliError(f"{run_dir} is not a run directory (no record.kv)", EXIT_BAD_FLAGS)
    try:
        written = report.write_report(run_dir, args.out, plots=args.plots)
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_IO) from exc
    for path in written:
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
