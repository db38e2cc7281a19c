"""Image-formation model and the pixel-level types shared by all modules.

The core identity is multiplicative: an observed image is the per-pixel
product of a reflectance (albedo) image and a shading factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when two images that must be pixel-aligned are not."""


@dataclass(frozen=True)
class Image:
    """Linear-RGB raster with channel-first layout (C, H, W).

    Values are finite and non-negative.  Reflectance and composed images
    are clamped to [0, 1] at generation time; shading may in principle
    exceed 1 but our generator clamps it as well.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"image must be (C, H, W), got shape {arr.shape}")
        if arr.shape[0] not in (1, 3):
            raise ValueError(f"image must have 1 or 3 channels, got {arr.shape[0]}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"degenerate spatial dims {arr.shape[1:]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if np.any(arr < 0):
            raise ValueError("image contains negative values")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel integer class ids in {0, ..., num_classes - 1}."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"label map must be (H, W), got shape {arr.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"label map must be integer-typed, got {arr.dtype}")
        object.__setattr__(self, "data", arr)

    def out_of_range(self) -> np.ndarray:
        """Boolean mask of pixels whose label falls outside the class set."""
        return (self.data < 0) | (self.data >= self.num_classes)


@dataclass(frozen=True)
class Sample:
    """One dataset element: image, its intrinsic ground truth, and labels."""

    image: Image
    reflectance: Image
    shading: Image  # single channel, broadcast over color
    labels: LabelMap
    scene_id: int = 0
    rig_id: int = 0
    camera_id: int = 0

    @property
    def height(self) -> int:
        return self.image.height

    @property
    def width(self) -> int:
        return self.image.width


def compose(reflectance: Image, shading: Image) -> Image:
    """Element-wise product of reflectance and shading.

    A single-channel shading broadcasts over the three color channels.
    """
    r, s = reflectance.data, shading.data
    if r.shape[1:] != s.shape[1:]:
        raise ShapeMismatchError(
            f"spatial dims differ: reflectance {r.shape} vs shading {s.shape}"
        )
    if s.shape[0] not in (1, r.shape[0]):
        raise ShapeMismatchError(
            f"shading channels {s.shape[0]} incompatible with reflectance {r.shape[0]}"
        )
    return Image(r * s)


def validate_sample(sample: Sample, tol: float = 1e-6) -> list[str]:
    """Check all Sample invariants; return one message per violation.

    Violations are data, not exceptions: a clean sample yields [].
    """
    violations: list[str] = []
    shape = sample.image.data.shape[1:]
    for name in ("reflectance", "shading"):
        other = getattr(sample, name)
        if other.data.shape[1:] != shape:
            violations.append(
                f"{name} spatial dims {other.data.shape[1:]} != image {shape}"
            )
    if sample.labels.data.shape != shape:
        violations.append(
            f"labels dims {sample.labels.data.shape} != image {shape}"
        )
        return violations  # residual check meaningless on misaligned data

    residual = np.abs(sample.image.data - compose(sample.reflectance, sample.shading).data)
    if residual.max(initial=0.0) > tol:
        bad = np.argwhere(residual > tol)
        c, y, x = bad[0]
        violations.append(
            f"|I - R*S| = {residual[c, y, x]:.3e} > {tol:g} at pixel "
            f"(c={c}, y={y}, x={x}) and {len(bad) - 1} more"
        )

    bad_labels = sample.labels.out_of_range()
    if bad_labels.any():
        y, x = np.argwhere(bad_labels)[0]
        violations.append(
            f"label out of range at (y={y}, x={x}): value "
            f"{sample.labels.data[y, x]} with C={sample.labels.num_classes}"
        )
    return violations
