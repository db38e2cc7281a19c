"""Evaluation-only measures: brightness-adjusted MSE, windowed LMSE and
DSSIM for the intrinsic components; confusion-matrix-based scores for
segmentation; and the aggregate report over a test split.

These are plain numpy implementations, independent of the autodiff path
used for training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import LabelMap

DEFAULT_LMSE_WINDOW = 20
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def mse(j, j_hat) -> float:
    j, j_hat = _as_array(j), _as_array(j_hat)
    if j.shape != j_hat.shape:
        raise ValueError(f"shape mismatch: {j.shape} vs {j_hat.shape}")
    return float(np.mean((j - j_hat) ** 2))


def _alpha(j: np.ndarray, j_hat: np.ndarray) -> float:
    denom = float(np.sum(j * j))
    if denom == 0.0:
        raise ValueError("prediction is identically zero; scale undefined")
    return float(np.sum(j * j_hat)) / denom


def smse(j, j_hat) -> float:
    """MSE after the error-minimizing global rescaling of the prediction.

    A prediction that is identically zero has no defined scale; it falls
    back to the zero-scale error mean(j_hat ** 2), matching the lmse
    window convention.
    """
    j, j_hat = _as_array(j), _as_array(j_hat)
    if j.shape != j_hat.shape:
        raise ValueError(f"shape mismatch: {j.shape} vs {j_hat.shape}")
    if np.sum(j * j) == 0.0:
        return float(np.mean(j_hat ** 2))
    return float(np.mean((_alpha(j, j_hat) * j - j_hat) ** 2))


def mse_brightness_adjusted(j, j_hat) -> float:
    """MSE after a single global rescaling of the prediction.

    Numerically identical to smse; kept as a named metric so reports
    read like the evaluation protocol.
    """
    return smse(j, j_hat)


def lmse(j, j_hat, k: int = DEFAULT_LMSE_WINDOW) -> float:
    """Mean of per-window SMSE over k x k windows at stride k // 2.

    Windows where the prediction is identically zero fall back to the
    zero-scale error mean(j_hat ** 2) for that window.
    """
    j, j_hat = _as_array(j), _as_array(j_hat)
    if j.shape != j_hat.shape:
        raise ValueError(f"shape mismatch: {j.shape} vs {j_hat.shape}")
    h, w = j.shape[-2:]
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than window size {k}")
    stride = k // 2
    values = []
    for y in range(0, h - k + 1, stride):
        for x in range(0, w - k + 1, stride):
            jw = j[..., y : y + k, x : x + k]
            tw = j_hat[..., y : y + k, x : x + k]
            if np.sum(jw * jw) == 0.0:
                values.append(float(np.mean(tw ** 2)))
            else:
                values.append(float(np.mean((_alpha(jw, tw) * jw - tw) ** 2)))
    return float(np.mean(values))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _windows(arr: np.ndarray, size: int) -> np.ndarray:
    # (H, W) -> (Ho, Wo, size, size) valid windows
    return np.lib.stride_tricks.sliding_window_view(arr, (size, size))


def ssim(j, j_hat) -> float:
    """Gaussian-weighted SSIM on the [0, 1] range, per channel, averaged."""
    j, j_hat = _as_array(j), _as_array(j_hat)
    if j.shape != j_hat.shape:
        raise ValueError(f"shape mismatch: {j.shape} vs {j_hat.shape}")
    if j.ndim == 2:
        j, j_hat = j[None], j_hat[None]
    h, w = j.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {SSIM_WINDOW}")
    win = _gaussian_window()
    channel_means = []
    for c in range(j.shape[0]):
        a, b = j[c], j_hat[c]
        wa = _windows(a, SSIM_WINDOW)
        wb = _windows(b, SSIM_WINDOW)
        mu_a = np.tensordot(wa, win, axes=([2, 3], [0, 1]))
        mu_b = np.tensordot(wb, win, axes=([2, 3], [0, 1]))
        ex_aa = np.tensordot(wa * wa, win, axes=([2, 3], [0, 1]))
        ex_bb = np.tensordot(wb * wb, win, axes=([2, 3], [0, 1]))
        ex_ab = np.tensordot(wa * wb, win, axes=([2, 3], [0, 1]))
        var_a = ex_aa - mu_a ** 2
        var_b = ex_bb - mu_b ** 2
        cov = ex_ab - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        channel_means.append(float(np.mean(num / den)))
    return float(np.mean(channel_means))


def dssim(j, j_hat) -> float:
    """Structural dissimilarity: (1 - SSIM) / 2, in [0, 1]."""
    return (1.0 - ssim(j, j_hat)) / 2.0


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows index ground truth, columns index prediction."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {arr.shape}")
        if np.any(arr < 0):
            raise ValueError("negative count in confusion matrix")
        object.__setattr__(self, "counts", arr)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self, path: str | Path, class_names: list[str] | None = None):
        names = class_names or [f"class{i}" for i in range(self.num_classes)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            writer.writerows(self.counts.tolist())


def confusion(pred, truth, num_classes: int) -> ConfusionMatrix:
    p = pred.data if isinstance(pred, LabelMap) else np.asarray(pred)
    t = truth.data if isinstance(truth, LabelMap) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    if p.max(initial=0) >= num_classes or t.max(initial=0) >= num_classes:
        raise ValueError(f"label value >= C={num_classes}")
    if p.min(initial=0) < 0 or t.min(initial=0) < 0:
        raise ValueError("negative label value")
    flat = t.astype(np.int64).ravel() * num_classes + p.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def seg_scores(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(global pixel accuracy, mean class accuracy, mean IoU)."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    global_acc = float(diag.sum() / total)
    present = rows > 0
    class_avg = float(np.mean(diag[present] / rows[present]))
    union = rows + cols - diag
    active = union > 0
    miou = float(np.mean(diag[active] / union[active]))
    return global_acc, class_avg, miou


@dataclass
class EvalReport:
    """Per-image and aggregate metrics over an evaluation split.

    Intrinsic metrics (mse/lmse/dssim per component) are mean with
    population std over images; segmentation scores come from one pooled
    confusion matrix.
    """

    num_images: int = 0
    intrinsic: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)
    per_image: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    segmentation: dict[str, float] = field(default_factory=dict)
    confusion_matrix: ConfusionMatrix | None = None
    class_names: list[str] = field(default_factory=list)

    def flat_metrics(self) -> dict[str, float]:
        out = {}
        for comp, stats in sorted(self.intrinsic.items()):
            for metric, (mean, std) in sorted(stats.items()):
                out[f"{comp}_{metric}_mean"] = mean
                out[f"{comp}_{metric}_std"] = std
        for key, value in sorted(self.segmentation.items()):
            out[f"seg_{key}"] = value
        return out

    def per_class_iou(self) -> np.ndarray | None:
        if self.confusion_matrix is None:
            return None
        counts = self.confusion_matrix.counts.astype(np.float64)
        diag = np.diag(counts)
        union = counts.sum(axis=1) + counts.sum(axis=0) - diag
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, diag / np.maximum(union, 1), np.nan)
        return iou

    def to_kv(self) -> str:
        lines = [f"num_images={self.num_images}"]
        for key, value in self.flat_metrics().items():
            lines.append(f"{key}={value!r}")
        iou = self.per_class_iou()
        if iou is not None:
            lines.append("per_class_iou=" + ",".join(repr(float(v)) for v in iou))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [
            f"evaluation over {self.num_images} images "
            "(std is population std over images)",
        ]
        for comp, stats in sorted(self.intrinsic.items()):
            row = "  ".join(
                f"{metric.upper()} {mean:.4f} +/- {std:.4f}"
                for metric, (mean, std) in sorted(stats.items())
            )
            lines.append(f"{comp:12s} {row}")
        if self.segmentation:
            lines.append(
                "segmentation  "
                + "  ".join(f"{k} {v:.4f}" for k, v in sorted(self.segmentation.items()))
            )
        iou = self.per_class_iou()
        if iou is not None:
            names = self.class_names or [f"class{i}" for i in range(len(iou))]
            for name, value in zip(names, iou):
                shown = "absent" if np.isnan(value) else f"{value:.4f}"
                lines.append(f"  iou[{name}] = {shown}")
        return "\n".join(lines) + "\n"


INTRINSIC_METRICS = ("mse", "lmse", "dssim")


def evaluate(
    predictions: list[dict[str, np.ndarray]],
    truths: list[dict[str, np.ndarray]],
    num_classes: int | None = None,
    class_names: list[str] | None = None,
    lmse_window: int = DEFAULT_LMSE_WINDOW,
) -> EvalReport:
    """Aggregate metrics over aligned prediction/ground-truth dicts.

    Recognized keys per entry: "reflectance", "shading" (arrays) and
    "labels" (integer map).  MSE here is the brightness-adjusted variant.
    """
    if not predictions or len(predictions) != len(truths):
        raise ValueError("need equal, non-empty prediction and truth lists")

    per_image: dict[str, dict[str, list[float]]] = {}
    pooled: ConfusionMatrix | None = None
    for pred, truth in zip(predictions, truths):
        for comp in ("reflectance", "shading"):
            if comp not in pred:
                continue
            stats = per_image.setdefault(comp, {m: [] for m in INTRINSIC_METRICS})
            stats["mse"].append(mse_brightness_adjusted(pred[comp], truth[comp]))
            stats["lmse"].append(lmse(pred[comp], truth[comp], k=lmse_window))
            stats["dssim"].append(dssim(pred[comp], truth[comp]))
        if "labels" in pred:
            if num_classes is None:
                raise ValueError("num_classes required for segmentation metrics")
            cm = confusion(pred["labels"], truth["labels"], num_classes)
            pooled = cm if pooled is None else pooled + cm

    report = EvalReport(num_images=len(predictions), class_names=class_names or [])
    report.per_image = per_image
    for comp, stats in per_image.items():
        report.intrinsic[comp] = {
            metric: (float(np.mean(vals)), float(np.std(vals)))
            for metric, vals in stats.items()
        }
    if pooled is not None:
        g, c, m = seg_scores(pooled)
        report.segmentation = {"global": g, "class_average": c, "miou": m}
        report.confusion_matrix = pooled
    return report
