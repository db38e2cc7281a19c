"""Training losses: MSE, scale-invariant MSE, their weighted combination,
the intrinsic pair loss, class-weighted cross entropy, and the joint
multi-task loss.  All are differentiable through the nn tensor engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import LabelMap
from .nn import Tensor, as_tensor, gather_channel, log_softmax_channel


class DegenerateInputError(ValueError):
    """Scale factor undefined: the prediction is identically zero."""


@dataclass(frozen=True)
class LossWeights:
    """All loss coefficients plus the joint-loss intrinsic multiplier.

    The effective intrinsic weight in the joint loss is
    gamma_il * intrinsic_scale * w.
    """

    gamma_smse: float = 0.95
    gamma_mse: float = 0.05
    gamma_r: float = 1.0
    gamma_s: float = 1.0
    gamma_ce: float = 1.0
    gamma_il: float = 1.0
    intrinsic_scale: float = 100.0
    w: float = 2.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma_smse + self.gamma_mse <= 0:
            raise ValueError("gamma_smse + gamma_mse must be positive")


@dataclass(frozen=True)
class ClassWeightVector:
    """Per-class weights for the cross-entropy loss.

    Classes absent from the training data carry weight 0 and are
    excluded from the loss.
    """

    weights: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.weights, dtype=np.float64)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)) or np.any(arr < 0) or not np.any(arr > 0):
            raise ValueError("class weights must be finite, non-negative, not all zero")
        object.__setattr__(self, "weights", arr)

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeightVector":
        return cls(np.ones(num_classes))


def _check_shapes(j: Tensor, j_hat: Tensor):
    if j.data.shape != j_hat.data.shape:
        raise ValueError(f"shape mismatch: {j.data.shape} vs {j_hat.data.shape}")


def mse(j, j_hat) -> Tensor:
    """Mean squared element difference over all pixels and channels."""
    j, j_hat = as_tensor(j), as_tensor(j_hat)
    _check_shapes(j, j_hat)
    return ((j - j_hat) ** 2.0).mean()


def optimal_alpha(j, j_hat, differentiate: bool = False):
    """Least-squares scale aligning the prediction with the target.

    Closed form: sum(j * j_hat) / sum(j * j).  A single scalar over all
    channels and pixels.  By default the result is detached (a float);
    with differentiate=True it stays in the graph.
    """
    j, j_hat = as_tensor(j), as_tensor(j_hat)
    _check_shapes(j, j_hat)
    denom = float(np.sum(j.data * j.data))
    if denom == 0.0:
        raise DegenerateInputError("prediction is identically zero; scale undefined")
    if differentiate:
        return (j * j_hat).sum() / (j * j).sum()
    return float(np.sum(j.data * j_hat.data)) / denom


def smse(j, j_hat, differentiate_alpha: bool = False) -> Tensor:
    """Scale-invariant MSE: MSE after rescaling the prediction optimally.

    The scale is treated as a per-step constant unless
    differentiate_alpha is set.
    """
    j, j_hat = as_tensor(j), as_tensor(j_hat)
    alpha = optimal_alpha(j, j_hat, differentiate=differentiate_alpha)
    return mse(j * alpha, j_hat)


def combined_loss(j, j_hat, weights: LossWeights, differentiate_alpha: bool = False) -> Tensor:
    """Weighted sum of scale-invariant and plain MSE."""
    j, j_hat = as_tensor(j), as_tensor(j_hat)
    total = weights.gamma_mse * mse(j, j_hat)
    if weights.gamma_smse:
        total = weights.gamma_smse * smse(j, j_hat, differentiate_alpha) + total
    return total


def intrinsic_loss(r, r_hat, s, s_hat, weights: LossWeights, differentiate_alpha: bool = False) -> Tensor:
    """Combined loss over the reflectance pair plus the shading pair."""
    return weights.gamma_r * combined_loss(r, r_hat, weights, differentiate_alpha) + (
        weights.gamma_s * combined_loss(s, s_hat, weights, differentiate_alpha)
    )


def cross_entropy(logits, labels, class_weights: ClassWeightVector | None = None) -> Tensor:
    """Softmax cross entropy over the class axis, weight-normalized.

    loss = -(1 / sum_x w[L(x)]) * sum_x w[L(x)] * log p_x[L(x)]
    With uniform weights this is the plain per-pixel mean.
    """
    logits = as_tensor(logits)
    label_arr = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    num_classes = logits.data.shape[logits.data.ndim - 3]
    if label_arr.max(initial=0) >= num_classes or label_arr.min(initial=0) < 0:
        raise ValueError(
            f"label out of range: values must lie in [0, {num_classes}), "
            f"got max {label_arr.max()}"
        )
    if class_weights is None:
        class_weights = ClassWeightVector.uniform(num_classes)
    if class_weights.weights.shape[0] != num_classes:
        raise ValueError(
            f"{class_weights.weights.shape[0]} class weights for {num_classes} classes"
        )

    pixel_w = class_weights.weights[label_arr].astype(logits.data.dtype)
    total_w = float(pixel_w.sum())
    if total_w == 0.0:
        raise ValueError("all evaluated pixels belong to zero-weight classes")
    logp = gather_channel(log_softmax_channel(logits), label_arr)
    return (Tensor(pixel_w) * logp).sum() * (-1.0 / total_w)


def joint_loss(
    logits,
    labels,
    r,
    r_hat,
    s,
    s_hat,
    weights: LossWeights,
    class_weights: ClassWeightVector | None = None,
    differentiate_alpha: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Multi-task total: weighted cross entropy plus scaled intrinsic loss.

    Returns the total and a per-term breakdown for logging; the breakdown
    values sum to the total exactly.
    """
    ce_term = weights.gamma_ce * cross_entropy(logits, labels, class_weights)
    il_term = (weights.gamma_il * weights.intrinsic_scale * weights.w) * intrinsic_loss(
        r, r_hat, s, s_hat, weights, differentiate_alpha
    )
    total = ce_term + il_term
    ce_value, il_value = ce_term.item(), il_term.item()
    # the reported total is the float sum of the reported terms, so the
    # breakdown always sums exactly (item() of a float32 total re-rounds)
    return total, {
        "cross_entropy": ce_value,
        "intrinsic": il_value,
        "total": ce_value + il_value,
    }


def median_frequency_weights(frequencies) -> ClassWeightVector:
    """Median-frequency balancing: w_c = median(present freqs) / freq_c.

    Absent classes (frequency 0) get weight 0 and are excluded from the
    loss.
    """
    freqs = np.asarray(frequencies, dtype=np.float64)
    present = freqs > 0
    if not present.any():
        raise ValueError("all class frequencies are zero")
    med = float(np.median(freqs[present]))
    weights = np.zeros_like(freqs)
    weights[present] = med / freqs[present]
    return ClassWeightVector(weights)
