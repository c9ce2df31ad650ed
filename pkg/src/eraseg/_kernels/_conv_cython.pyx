# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled 3x3 convolution kernels (stride 1, zero padding 1).

Same contract as the numpy fallback; float32 and float64 supported.
"""

import numpy as np

cimport cython


ctypedef fused real:
    float
    double


cdef void _pad(real[:, :, ::1] x, real[:, :, ::1] xp) noexcept nogil:
    cdef Py_ssize_t c, i, j
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], w = x.shape[2]
    for c in range(cin):
        for i in range(h):
            for j in range(w):
                xp[c, i + 1, j + 1] = x[c, i, j]


def conv3x3_forward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[::1] b):
    """y[o,i,j] = b[o] + sum_{c,dy,dx} w[o,c,dy,dx] * xpad[c,i+dy,j+dx]."""
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], ww = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0]
    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((cin, h + 2, ww + 2), dtype=dtype)
    y_arr = np.zeros((cout, h, ww), dtype=dtype)
    cdef real[:, :, ::1] xp = xp_arr
    cdef real[:, :, ::1] y = y_arr
    cdef Py_ssize_t o, c, dy, dx, i, j
    cdef real wv
    with nogil:
        _pad(x, xp)
        for o in range(cout):
            for i in range(h):
                for j in range(ww):
                    y[o, i, j] = b[o]
            for c in range(cin):
                for dy in range(3):
                    for dx in range(3):
                        wv = w[o, c, dy, dx]
                        for i in range(h):
                            for j in range(ww):
                                y[o, i, j] += wv * xp[c, i + dy, j + dx]
    return y_arr


def conv3x3_backward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[:, :, ::1] gy):
    """Gradients (gx, gw, gb) of conv3x3_forward."""
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], ww = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0]
    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((cin, h + 2, ww + 2), dtype=dtype)
    gxp_arr = np.zeros((cin, h + 2, ww + 2), dtype=dtype)
    gw_arr = np.zeros((cout, cin, 3, 3), dtype=dtype)
    gb_arr = np.zeros(cout, dtype=dtype)
    cdef real[:, :, ::1] xp = xp_arr
    cdef real[:, :, ::1] gxp = gxp_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr
    cdef Py_ssize_t o, c, dy, dx, i, j
    cdef real wv, acc, g
    with nogil:
        _pad(x, xp)
        for o in range(cout):
            acc = 0
            for i in range(h):
                for j in range(ww):
                    acc += gy[o, i, j]
            gb[o] = acc
            for c in range(cin):
                for dy in range(3):
                    for dx in range(3):
                        wv = w[o, c, dy, dx]
                        acc = 0
                        for i in range(h):
                            for j in range(ww):
                                g = gy[o, i, j]
                                acc += g * xp[c, i + dy, j + dx]
                                gxp[c, i + dy, j + dx] += wv * g
                        gw[o, c, dy, dx] = acc
    gx_arr = np.ascontiguousarray(gxp_arr[:, 1:-1, 1:-1])
    return gx_arr, gw_arr, gb_arr
