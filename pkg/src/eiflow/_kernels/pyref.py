"""Pure numpy reference implementations of the hot kernels.

Every function here has a matching compiled twin in ``_core``; the package
selects a backend at import time. Both backends must agree bit-for-bit on
float64 inputs and to rounding noise on float32, which the test suite checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xpad: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Unfold a padded (N, C, Hp, Wp) array into (N, C*kh*kw, Ho*Wo) patches."""
    n, c, hp, wp = xpad.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xpad.strides
    view = as_strided(
        xpad,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(view.reshape(n, c * kh * kw, ho * wo))


def col2im(
    cols: np.ndarray, hp: int, wp: int, kh: int, kw: int, stride: int
) -> np.ndarray:
    """Scatter-add (N, C*kh*kw, Ho*Wo) patch gradients back to (N, C, Hp, Wp)."""
    n = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                c6[:, :, i, j]
            )
    return out


def _corner_values(inp: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Gather (N, C, P) values at integer corners, clipping indices into range."""
    n, _, h, w = inp.shape
    yc = np.clip(yy, 0, h - 1)
    xc = np.clip(xx, 0, w - 1)
    rows = np.arange(n)[:, None]
    v = inp[rows, :, yc, xc]  # (N, P, C): advanced indices split by the slice
    return np.moveaxis(v, -1, 1)


def bilinear_gather(inp: np.ndarray, coords: np.ndarray, border: bool) -> np.ndarray:
    """Sample (N, C, H, W) at absolute pixel coords (N, 2, Ho, Wo) -> (N, C, Ho, Wo).

    coords channel 0 is x (column), channel 1 is y (row). ``border`` clamps
    out-of-range coords to the edge; otherwise out-of-range corners read zero.
    """
    n, c, h, w = inp.shape
    ho, wo = coords.shape[2], coords.shape[3]
    px = coords[:, 0].reshape(n, -1)
    py = coords[:, 1].reshape(n, -1)
    if border:
        px = np.clip(px, 0.0, w - 1.0)
        py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    dt = inp.dtype.type
    w00 = ((1 - fx) * (1 - fy)).astype(dt)
    w10 = (fx * (1 - fy)).astype(dt)
    w01 = ((1 - fx) * fy).astype(dt)
    w11 = (fx * fy).astype(dt)
    if not border:
        mx0 = (x0 >= 0) & (x0 < w)
        mx1 = (x1 >= 0) & (x1 < w)
        my0 = (y0 >= 0) & (y0 < h)
        my1 = (y1 >= 0) & (y1 < h)
        w00 = w00 * (mx0 & my0)
        w10 = w10 * (mx1 & my0)
        w01 = w01 * (mx0 & my1)
        w11 = w11 * (mx1 & my1)
    out = (
        w00[:, None] * _corner_values(inp, y0, x0)
        + w10[:, None] * _corner_values(inp, y0, x1)
        + w01[:, None] * _corner_values(inp, y1, x0)
        + w11[:, None] * _corner_values(inp, y1, x1)
    )
    return out.reshape(n, c, ho, wo)


def bilinear_scatter(
    grad_out: np.ndarray, inp: np.ndarray, coords: np.ndarray, border: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of bilinear_gather: returns (grad_inp, grad_coords)."""
    n, c, h, w = inp.shape
    ho, wo = coords.shape[2], coords.shape[3]
    g = grad_out.reshape(n, c, -1)
    px = coords[:, 0].reshape(n, -1)
    py = coords[:, 1].reshape(n, -1)
    # In border mode the clamp flattens the sampled value outside the range,
    # so coord grads vanish there. Zero padding keeps varying until a point
    # is a full pixel outside, which the masked-corner formula handles.
    if border:
        gx_live = (px >= 0.0) & (px <= w - 1.0)
        gy_live = (py >= 0.0) & (py <= h - 1.0)
        px = np.clip(px, 0.0, w - 1.0)
        py = np.clip(py, 0.0, h - 1.0)
    else:
        gx_live = gy_live = np.ones(px.shape, dtype=bool)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(inp.dtype)
    fy = (py - y0).astype(inp.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    if border:
        m00 = m10 = m01 = m11 = np.ones(px.shape, dtype=inp.dtype)
    else:
        mx0 = (x0 >= 0) & (x0 < w)
        mx1 = (x1 >= 0) & (x1 < w)
        my0 = (y0 >= 0) & (y0 < h)
        my1 = (y1 >= 0) & (y1 < h)
        m00 = (mx0 & my0).astype(inp.dtype)
        m10 = (mx1 & my0).astype(inp.dtype)
        m01 = (mx0 & my1).astype(inp.dtype)
        m11 = (mx1 & my1).astype(inp.dtype)

    grad_inp = np.zeros_like(inp)
    rows = np.arange(n)[:, None, None]
    chan = np.arange(c)[None, :, None]
    corners = (
        (y0, x0, (1 - fx) * (1 - fy) * m00),
        (y0, x1, fx * (1 - fy) * m10),
        (y1, x0, (1 - fx) * fy * m01),
        (y1, x1, fx * fy * m11),
    )
    for yy, xx, wgt in corners:
        yc = np.clip(yy, 0, h - 1)[:, None, :]
        xc = np.clip(xx, 0, w - 1)[:, None, :]
        np.add.at(grad_inp, (rows, chan, yc, xc), g * wgt[:, None, :])

    v00 = _corner_values(inp, y0, x0) * m00[:, None]
    v10 = _corner_values(inp, y0, x1) * m10[:, None]
    v01 = _corner_values(inp, y1, x0) * m01[:, None]
    v11 = _corner_values(inp, y1, x1) * m11[:, None]
    fxc = fx[:, None]
    fyc = fy[:, None]
    dpx = (g * ((1 - fyc) * (v10 - v00) + fyc * (v11 - v01))).sum(axis=1)
    dpy = (g * ((1 - fxc) * (v01 - v00) + fxc * (v11 - v10))).sum(axis=1)
    dpx = dpx * gx_live
    dpy = dpy * gy_live
    grad_coords = np.stack([dpx, dpy], axis=1).reshape(n, 2, ho, wo)
    return grad_inp, grad_coords.astype(coords.dtype)


def voxel_accumulate(
    bins: int,
    height: int,
    width: int,
    xs: np.ndarray,
    ys: np.ndarray,
    pos: np.ndarray,
    ps: np.ndarray,
) -> np.ndarray:
    """Accumulate events into a (2*bins, H, W) float32 grid.

    ``pos`` is the event time already normalized to [0, bins-1] in float64.
    Each event splits linearly between its two nearest bins; positive polarity
    occupies channels [0, bins), negative [bins, 2*bins).
    """
    vol = np.zeros((2 * bins, height, width), dtype=np.float32)
    if len(xs) == 0:
        return vol
    b0 = np.floor(pos).astype(np.int64)
    b0 = np.clip(b0, 0, bins - 1)
    frac = pos - b0
    ch = b0 + np.where(ps > 0, 0, bins)
    np.add.at(vol, (ch, ys, xs), (1.0 - frac).astype(np.float32))
    m = b0 + 1 < bins
    np.add.at(vol, (ch[m] + 1, ys[m], xs[m]), frac[m].astype(np.float32))
    return vol
