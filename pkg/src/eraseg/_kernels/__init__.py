"""Hot convolution kernels with a backend chosen at import time.

The compiled Cython module is preferred when present; otherwise a vectorized
numpy implementation takes over with identical semantics (floating-point
summation order differs, so results agree to rounding, not bitwise).

Set ERASEG_KERNELS=numpy|compiled to force a backend ("compiled" raises if
the extension is unavailable).
"""

from __future__ import annotations

import os

import numpy as np

from . import _conv_numpy

_requested = os.environ.get("ERASEG_KERNELS", "auto").lower()
if _requested not in {"auto", "compiled", "numpy"}:
    raise RuntimeError(f"ERASEG_KERNELS must be auto|compiled|numpy, got {_requested!r}")

if _requested == "numpy":
    _impl = _conv_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _conv_cython as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise RuntimeError("ERASEG_KERNELS=compiled but the extension is not built")
        _impl = _conv_numpy
        BACKEND = "numpy"


def backend_name() -> str:
    return BACKEND


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1: (Cin,H,W) -> (Cout,H,W)."""
    return np.asarray(_impl.conv3x3_forward(x, w, b))


def conv3x3_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, gw, gb) of conv3x3_forward at (x, w)."""
    gx, gw, gb = _impl.conv3x3_backward(x, w, gy)
    return np.asarray(gx), np.asarray(gw), np.asarray(gb)
