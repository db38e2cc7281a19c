"""Run reporting: delimited metric tables plus matplotlib figures.

Figures are rendered headlessly to PNG with a fixed style so repeated
invocations on the same run produce identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .train import RunRecord

FIG_DPI = 110


def _load_run(run_dir: Path) -> tuple[dict[str, str], dict[str, str]]:
    record = RunRecord.read_kv(run_dir / "record.kv")
    eval_kv = {}
    if (run_dir / "eval.kv").exists():
        eval_kv = RunRecord.read_kv(run_dir / "eval.kv")
    return record, eval_kv


def _traces(record: dict[str, str]) -> dict[str, list[float]]:
    out = {}
    for key, value in record.items():
        if key.startswith("trace.") and value:
            out[key[len("trace."):]] = [float(v) for v in value.split(",")]
    return out


def _metric_rows(eval_kv: dict[str, str]) -> list[tuple[str, float]]:
    rows = []
    for key, value in sorted(eval_kv.items()):
        if key in ("num_images",) or key == "per_class_iou":
            continue
        rows.append((key, float(value)))
    return rows


def write_report(run_dir: str | Path, out_dir: str | Path | None = None, plots: bool = False) -> list[Path]:
    """Summarize one finished run; returns the list of files written."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    record, eval_kv = _load_run(run_dir)
    written: list[Path] = []

    table = out / "report.tsv"
    lines = ["metric\tvalue"]
    lines += [f"{k}\t{v:.8g}" for k, v in _metric_rows(eval_kv)]
    table.write_text("\n".join(lines) + "\n")
    written.append(table)

    summary = out / "report.txt"
    text = [f"run: {record.get('experiment', '?')}  config {record.get('config_hash', '?')}"]
    traces = _traces(record)
    if traces.get("total"):
        text.append(
            f"final training loss: {traces['total'][-1]:.6f} "
            f"after {len(traces['total'])} epochs"
        )
    text += [f"  {k} = {v:.6f}" for k, v in _metric_rows(eval_kv)]
    summary.write_text("\n".join(text) + "\n")
    written.append(summary)

    if plots:
        written += render_figures(run_dir, out, record, eval_kv)
    return written


def render_figures(run_dir: Path, out: Path, record: dict[str, str], eval_kv: dict[str, str]) -> list[Path]:
    written: list[Path] = []
    traces = _traces(record)
    if traces:
        fig, ax = plt.subplots(figsize=(6, 4))
        for term in sorted(traces):
            ax.plot(np.arange(1, len(traces[term]) + 1), traces[term], label=term)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        ax.legend()
        ax.set_title(record.get("experiment", "run"))
        fig.tight_layout()
        path = out / "loss_curves.png"
        fig.savefig(path, dpi=FIG_DPI)
        plt.close(fig)
        written.append(path)

    if eval_kv:
        fig, ax = plt.subplots(figsize=(6, 4))
        if "per_class_iou" in eval_kv:
            values = [float(v) for v in eval_kv["per_class_iou"].split(",")]
            ax.bar(np.arange(len(values)), values)
            ax.set_xlabel("class id")
            ax.set_ylabel("IoU")
            ax.set_ylim(0, 1)
            ax.set_title("per-class IoU")
        else:
            rows = _metric_rows(eval_kv)
            names = [k for k, _ in rows]
            ax.bar(np.arange(len(rows)), [v for _, v in rows])
            ax.set_xticks(np.arange(len(rows)))
            ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
            ax.set_title("evaluation metrics")
        fig.tight_layout()
        path = out / "metrics_bars.png"
        fig.savefig(path, dpi=FIG_DPI)
        plt.close(fig)
        written.append(path)
    return written


def compare_runs(run_dirs: list[str | Path]) -> tuple[str, list[str]]:
    """Side-by-side metric table over runs, TSV-formatted.

    Returns (table text, metric keys).  Raises ValueError when the runs
    expose different metric sets.  With exactly two runs a delta column
    (second minus first) is appended.
    """
    loaded = []
    for d in run_dirs:
        record, eval_kv = _load_run(Path(d))
        loaded.append((Path(d).name, record, eval_kv))

    key_sets = [tuple(sorted(k for k in ev if k != "per_class_iou")) for _, _, ev in loaded]
    if len(set(key_sets)) != 1:
        raise ValueError("runs expose different metric sets; cannot compare")

    keys = [k for k in key_sets[0] if k != "num_images"]
    names = [name for name, _, _ in loaded]
    header = ["metric"] + names + (["delta"] if len(loaded) == 2 else [])
    lines = ["\t".join(header)]
    for key in keys:
        values = [float(ev[key]) for _, _, ev in loaded]
        row = [key] + [f"{v:.8g}" for v in values]
        if len(values) == 2:
            row.append(f"{values[1] - values[0]:+.8g}")
        lines.append("\t".join(row))

    # per-class IoU rows when every run has them
    if all("per_class_iou" in ev for _, _, ev in loaded):
        per_run = [[float(v) for v in ev["per_class_iou"].split(",")] for _, _, ev in loaded]
        for c in range(len(per_run[0])):
            values = [vals[c] for vals in per_run]
            row = [f"iou_class{c}"] + [f"{v:.8g}" for v in values]
            if len(values) == 2:
                row.append(f"{values[1] - values[0]:+.8g}")
            lines.append("\t".join(row))
    return "\n".join(lines) + "\n", keys
