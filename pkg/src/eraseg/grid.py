"""Core 2D raster types and the overlap / surface-distance metrics.

Conventions used throughout the package:

* arrays are row-major with shape (H, W); coordinates are (x, y) with x
  growing rightward (columns) and y growing downward (rows);
* binary masks are boolean arrays;
* a mask's surface is the set of its pixels with at least one 4-neighbor
  outside the mask, where the image border counts as outside;
* surface distances are Euclidean pixel-center distances scaled by a
  uniform ``spacing`` factor (default 1.0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class Image2D:
    """Single-channel intensity image, float32 values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {arr.shape}")
        if arr.shape[0] < 8 or arr.shape[1] < 8:
            raise ValueError(f"image must be at least 8x8, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ClassMask:
    """Per-pixel class labels in [0, num_classes); class 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {arr.shape}")
        if self.num_classes < 1 or self.num_classes > 256:
            raise ValueError(f"num_classes out of range: {self.num_classes}")
        if arr.size and int(arr.max()) >= self.num_classes:
            raise ValueError(f"mask value {int(arr.max())} >= num_classes {self.num_classes}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def binary(self, class_id: int) -> np.ndarray:
        return self.data == class_id


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities, shape (C, H, W); columns sum to 1."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"probability map must be (C, H, W), got {arr.shape}")
        if np.any(arr < 0):
            raise ValueError("probabilities must be nonnegative")
        sums = arr.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("per-pixel probabilities must sum to 1 within 1e-5")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class MetricReport:
    """Per-class DSC/ASSD plus means over foreground classes (1..C-1).

    Undefined ASSD entries (an empty surface on either side) are stored as
    the image-diagonal sentinel so the means stay finite and bounded.
    """

    per_class_dsc: list[float]
    per_class_assd: list[float]
    mean_dsc: float
    mean_assd: float
    assd_defined: list[bool] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class_dsc": self.per_class_dsc,
            "per_class_assd": self.per_class_assd,
            "mean_dsc": self.mean_dsc,
            "mean_assd": self.mean_assd,
            "assd_defined": self.assd_defined,
        }


def _check_binary_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("masks must be 2D")
    return a, b


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _check_binary_pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def surface_pixels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of mask pixels with a 4-neighbor outside the mask.

    The image border counts as outside, so a mask touching the border has
    surface there.
    """
    m = np.asarray(mask).astype(bool)
    interior = np.zeros_like(m)
    interior[1:-1, 1:-1] = (
        m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    )
    return m & ~interior


def assd(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> float | None:
    """Average symmetric surface distance between two binary masks.

    Returns None (undefined) when either mask is empty; aggregating callers
    substitute the image-diagonal sentinel (see :func:`diagonal_sentinel`).
    """
    a, b = _check_binary_pair(a, b)
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if not a.any() or not b.any():
        return None
    sa = np.argwhere(surface_pixels(a)).astype(np.float64)
    sb = np.argwhere(surface_pixels(b)).astype(np.float64)
    d_ab = cKDTree(sb).query(sa)[0]
    d_ba = cKDTree(sa).query(sb)[0]
    total = d_ab.sum() + d_ba.sum()
    return float(total / (len(sa) + len(sb)) * spacing)


def diagonal_sentinel(height: int, width: int, spacing: float = 1.0) -> float:
    """Bounded stand-in for undefined surface distances: the image diagonal."""
    return math.hypot(height, width) * spacing


def mean_foreground_dsc(a: ClassMask, b: ClassMask) -> float:
    """Mean one-vs-rest Dice over classes 1..C-1 (degenerate rules of dsc)."""
    if a.num_classes != b.num_classes:
        raise ValueError("num_classes mismatch")
    if a.num_classes < 2:
        raise ValueError("need at least one foreground class")
    scores = [dsc(a.binary(c), b.binary(c)) for c in range(1, a.num_classes)]
    return float(np.mean(scores))


def evaluate(pred: ClassMask, gt: ClassMask, spacing: float = 1.0) -> MetricReport:
    """One-vs-rest DSC and ASSD per class, with foreground means.

    The per-class lists cover all C classes (background included); the means
    run over classes 1..C-1 only. Undefined ASSD is replaced by the
    image-diagonal sentinel.
    """
    if pred.num_classes != gt.num_classes:
        raise ValueError(f"num_classes mismatch: {pred.num_classes} vs {gt.num_classes}")
    if pred.data.shape != gt.data.shape:
        raise ValueError("mask shape mismatch")
    sentinel = diagonal_sentinel(pred.height, pred.width, spacing)
    dscs: list[float] = []
    assds: list[float] = []
    defined: list[bool] = []
    for c in range(pred.num_classes):
        pa, ga = pred.binary(c), gt.binary(c)
        dscs.append(dsc(pa, ga))
        d = assd(pa, ga, spacing)
        defined.append(d is not None)
        assds.append(sentinel if d is None else d)
    fg = slice(1, pred.num_classes)
    return MetricReport(
        per_class_dsc=dscs,
        per_class_assd=assds,
        mean_dsc=float(np.mean(dscs[fg])),
        mean_assd=float(np.mean(assds[fg])),
        assd_defined=defined,
    )
