# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``pyref``.

Signatures, semantics, and edge handling mirror the numpy reference exactly;
the backend-parity tests compare the two element by element.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] xpad, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = xpad.shape[0], c = xpad.shape[1]
    cdef Py_ssize_t hp = xpad.shape[2], wp = xpad.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.empty((n, c * kh * kw, ho * wo),
                   dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            for ox in range(wo):
                                cols[b, row, oy * wo + ox] = \
                                    xpad[b, ch, oy * stride + i, ox * stride + j]
    return out


def col2im(const real[:, :, ::1] cols, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp),
                   dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] xg = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            for ox in range(wo):
                                xg[b, ch, oy * stride + i, ox * stride + j] += \
                                    cols[b, row, oy * wo + ox]
    return out


cdef inline Py_ssize_t _clampi(Py_ssize_t v, Py_ssize_t lo, Py_ssize_t hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def bilinear_gather(const real[:, :, :, ::1] inp, const real[:, :, :, ::1] coords, bint border):
    cdef Py_ssize_t n = inp.shape[0], c = inp.shape[1]
    cdef Py_ssize_t h = inp.shape[2], w = inp.shape[3]
    cdef Py_ssize_t ho = coords.shape[2], wo = coords.shape[3]
    out_arr = np.empty((n, c, ho, wo),
                       dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oy, ox, x0, y0, x1, y1, x0c, x1c, y0c, y1c
    cdef real px, py, fx, fy, w00, w10, w01, w11, acc
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    px = coords[b, 0, oy, ox]
                    py = coords[b, 1, oy, ox]
                    if border:
                        if px < 0:
                            px = 0
                        if px > w - 1:
                            px = w - 1
                        if py < 0:
                            py = 0
                        if py > h - 1:
                            py = h - 1
                    x0 = <Py_ssize_t>floor(px)
                    y0 = <Py_ssize_t>floor(py)
                    fx = px - <real>x0
                    fy = py - <real>y0
                    x1 = x0 + 1
                    y1 = y0 + 1
                    w00 = (1 - fx) * (1 - fy)
                    w10 = fx * (1 - fy)
                    w01 = (1 - fx) * fy
                    w11 = fx * fy
                    if not border:
                        if x0 < 0 or x0 >= w or y0 < 0 or y0 >= h:
                            w00 = 0
                        if x1 < 0 or x1 >= w or y0 < 0 or y0 >= h:
                            w10 = 0
                        if x0 < 0 or x0 >= w or y1 < 0 or y1 >= h:
                            w01 = 0
                        if x1 < 0 or x1 >= w or y1 < 0 or y1 >= h:
                            w11 = 0
                    x0c = _clampi(x0, 0, w - 1)
                    x1c = _clampi(x1, 0, w - 1)
                    y0c = _clampi(y0, 0, h - 1)
                    y1c = _clampi(y1, 0, h - 1)
                    for ch in range(c):
                        acc = (w00 * inp[b, ch, y0c, x0c]
                               + w10 * inp[b, ch, y0c, x1c]
                               + w01 * inp[b, ch, y1c, x0c]
                               + w11 * inp[b, ch, y1c, x1c])
                        out[b, ch, oy, ox] = acc
    return out_arr


def bilinear_scatter(const real[:, :, :, ::1] grad_out, const real[:, :, :, ::1] inp,
                     const real[:, :, :, ::1] coords, bint border):
    cdef Py_ssize_t n = inp.shape[0], c = inp.shape[1]
    cdef Py_ssize_t h = inp.shape[2], w = inp.shape[3]
    cdef Py_ssize_t ho = coords.shape[2], wo = coords.shape[3]
    gi_arr = np.zeros((n, c, h, w),
                      dtype=np.float32 if real is float else np.float64)
    gc_arr = np.zeros((n, 2, ho, wo),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gi = gi_arr
    cdef real[:, :, :, ::1] gc = gc_arr
    cdef Py_ssize_t b, ch, oy, ox, x0, y0, x1, y1, x0c, x1c, y0c, y1c
    cdef real px, py, fx, fy, m00, m10, m01, m11
    cdef real g, v00, v10, v01, v11, dpx, dpy
    cdef bint gx_live, gy_live
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    px = coords[b, 0, oy, ox]
                    py = coords[b, 1, oy, ox]
                    # Border clamp flattens the value outside the range, so
                    # coord grads vanish there; zero padding keeps varying
                    # until a point is a full pixel outside.
                    gx_live = (not border) or (0 <= px <= w - 1)
                    gy_live = (not border) or (0 <= py <= h - 1)
                    if border:
                        if px < 0:
                            px = 0
                        if px > w - 1:
                            px = w - 1
                        if py < 0:
                            py = 0
                        if py > h - 1:
                            py = h - 1
                    x0 = <Py_ssize_t>floor(px)
                    y0 = <Py_ssize_t>floor(py)
                    fx = px - <real>x0
                    fy = py - <real>y0
                    x1 = x0 + 1
                    y1 = y0 + 1
                    if border:
                        m00 = m10 = m01 = m11 = 1
                    else:
                        m00 = 0 if (x0 < 0 or x0 >= w or y0 < 0 or y0 >= h) else 1
                        m10 = 0 if (x1 < 0 or x1 >= w or y0 < 0 or y0 >= h) else 1
                        m01 = 0 if (x0 < 0 or x0 >= w or y1 < 0 or y1 >= h) else 1
                        m11 = 0 if (x1 < 0 or x1 >= w or y1 < 0 or y1 >= h) else 1
                    x0c = _clampi(x0, 0, w - 1)
                    x1c = _clampi(x1, 0, w - 1)
                    y0c = _clampi(y0, 0, h - 1)
                    y1c = _clampi(y1, 0, h - 1)
                    dpx = 0
                    dpy = 0
                    for ch in range(c):
                        g = grad_out[b, ch, oy, ox]
                        gi[b, ch, y0c, x0c] += g * (1 - fx) * (1 - fy) * m00
                        gi[b, ch, y0c, x1c] += g * fx * (1 - fy) * m10
                        gi[b, ch, y1c, x0c] += g * (1 - fx) * fy * m01
                        gi[b, ch, y1c, x1c] += g * fx * fy * m11
                        v00 = inp[b, ch, y0c, x0c] * m00
                        v10 = inp[b, ch, y0c, x1c] * m10
                        v01 = inp[b, ch, y1c, x0c] * m01
                        v11 = inp[b, ch, y1c, x1c] * m11
                        dpx += g * ((1 - fy) * (v10 - v00) + fy * (v11 - v01))
                        dpy += g * ((1 - fx) * (v01 - v00) + fx * (v11 - v10))
                    gc[b, 0, oy, ox] = dpx if gx_live else 0
                    gc[b, 1, oy, ox] = dpy if gy_live else 0
    return gi_arr, gc_arr


def voxel_accumulate(Py_ssize_t bins, Py_ssize_t height, Py_ssize_t width,
                     const cnp.int64_t[::1] xs, const cnp.int64_t[::1] ys,
                     const double[::1] pos, const cnp.int8_t[::1] ps):
    out = np.zeros((2 * bins, height, width), dtype=np.float32)
    cdef float[:, :, ::1] vol = out
    cdef Py_ssize_t i, n = xs.shape[0], b0, ch
    cdef double frac
    with nogil:
        for i in range(n):
            b0 = <Py_ssize_t>floor(pos[i])
            b0 = _clampi(b0, 0, bins - 1)
            frac = pos[i] - <double>b0
            ch = b0 if ps[i] > 0 else b0 + bins
            vol[ch, ys[i], xs[i]] += <float>(1.0 - frac)
            if b0 + 1 < bins:
                vol[ch + 1, ys[i], xs[i]] += <float>frac
    return out
