"""Vectorized numpy fallback for the 3x3 convolution kernels (im2col + BLAS)."""

from __future__ import annotations

import numpy as np


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patch matrix for a 3x3 window, zero padding 1."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # windows[c, i, j, dy, dx] == xp[c, i+dy, j+dx]
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y[o,i,j] = b[o] + sum_{c,dy,dx} w[o,c,dy,dx] * xpad[c,i+dy,j+dx]."""
    cout = w.shape[0]
    _, h, ww = x.shape
    cols = _im2col3(x)
    y = w.reshape(cout, -1) @ cols
    y += b[:, None]
    return y.reshape(cout, h, ww)


def conv3x3_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, gw, gb) of the forward pass above."""
    cin, h, ww = x.shape
    cout = w.shape[0]
    cols = _im2col3(x)
    gy_mat = gy.reshape(cout, -1)
    gb = gy_mat.sum(axis=1)
    gw = (gy_mat @ cols.T).reshape(w.shape)
    gcols = (w.reshape(cout, -1).T @ gy_mat).reshape(cin, 3, 3, h, ww)
    gxp = np.zeros((cin, h + 2, ww + 2), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            gxp[:, dy : dy + h, dx : dx + ww] += gcols[:, dy, dx]
    gx = gxp[:, 1:-1, 1:-1]
    return gx, gw, gb
