"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors record their parents and a backward closure when ``requires_grad`` is
set; ``backward`` on a scalar walks the recorded graph once in reverse
topological order. The default dtype is float32; float64 runs end to end so
finite-difference checks can use high precision. Binary ops refuse mixed
dtypes rather than promoting silently.

Gradient buffers are never mutated in place: accumulation always allocates,
so a gradient may safely alias an upstream buffer or a broadcast view.
Intermediate gradients are freed as soon as their backward closure has run;
only leaves keep ``grad``. A consumed tape cannot be walked twice.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import _kernels as _k

_ALLOWED = (np.float32, np.float64)


def _check_dtype(a: "Tensor", b: "Tensor") -> None:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._spent = False

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Underlying array (shared buffer; treat as read-only)."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._bad_item()

    def _bad_item(self):
        raise ValueError("item() expects a single-element tensor")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------------
    def _const(self, other) -> np.ndarray:
        arr = np.asarray(other, dtype=self.data.dtype)
        return arr

    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            _check_dtype(self, other)
            out = _node(self.data + other.data, (self, other))

            def bw(g, a=self, b=other):
                _accum(a, _unbroadcast(g, a.data.shape))
                _accum(b, _unbroadcast(g, b.data.shape))

            return _finish(out, bw)
        c = self._const(other)
        out = _node(self.data + c, (self,))

        def bwc(g, a=self):
            _accum(a, _unbroadcast(g, a.data.shape))

        return _finish(out, bwc)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            _check_dtype(self, other)
            out = _node(self.data - other.data, (self, other))

            def bw(g, a=self, b=other):
                _accum(a, _unbroadcast(g, a.data.shape))
                _accum(b, _unbroadcast(-g, b.data.shape))

            return _finish(out, bw)
        return self.__add__(-np.asarray(other))

    def __rsub__(self, other) -> "Tensor":
        return (-self).__add__(other)

    def __neg__(self) -> "Tensor":
        out = _node(-self.data, (self,))

        def bw(g, a=self):
            _accum(a, -g)

        return _finish(out, bw)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            _check_dtype(self, other)
            out = _node(self.data * other.data, (self, other))

            def bw(g, a=self, b=other):
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

            return _finish(out, bw)
        c = self._const(other)
        out = _node(self.data * c, (self,))

        def bwc(g, a=self, cc=c):
            _accum(a, _unbroadcast(g * cc, a.data.shape))

        return _finish(out, bwc)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self.__mul__(1.0 / np.asarray(other, dtype=np.float64))

    def __pow__(self, p) -> "Tensor":
        p = float(p)
        out = _node(self.data**p, (self,))

        def bw(g, a=self, pp=p):
            _accum(a, g * (pp * a.data ** (pp - 1.0)))

        return _finish(out, bw)

    # -- activations -------------------------------------------------------------
    def relu(self) -> "Tensor":
        out = _node(np.maximum(self.data, 0), (self,))

        def bw(g, a=self):
            _accum(a, g * (a.data > 0))

        return _finish(out, bw)

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = _node(y, (self,))

        def bw(g, a=self, yy=y):
            _accum(a, g * (yy * (1.0 - yy)))

        return _finish(out, bw)

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = _node(y, (self,))

        def bw(g, a=self, yy=y):
            _accum(a, g * (1.0 - yy * yy))

        return _finish(out, bw)

    # -- reductions ----------------------------------------------------------
    def _kept_shape(self, axis) -> tuple[tuple[int, ...], tuple[int, ...]]:
        nd = self.data.ndim
        if axis is None:
            axes = tuple(range(nd))
        elif isinstance(axis, int):
            axes = (axis % nd,)
        else:
            axes = tuple(a % nd for a in axis)
        kept = tuple(1 if i in axes else s for i, s in enumerate(self.data.shape))
        return axes, kept

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes, kept = self._kept_shape(axis)
        out = _node(self.data.sum(axis=axes, keepdims=keepdims), (self,))

        def bw(g, a=self, kk=kept):
            _accum(a, np.broadcast_to(g.reshape(kk), a.data.shape))

        return _finish(out, bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes, kept = self._kept_shape(axis)
        count = 1
        for ax in axes:
            count *= self.data.shape[ax]
        if count == 0:
            raise ValueError("mean over an empty axis is undefined")
        out = _node(self.data.mean(axis=axes, keepdims=keepdims), (self,))
        inv = self.data.dtype.type(1.0 / count)

        def bw(g, a=self, kk=kept, ii=inv):
            _accum(a, np.broadcast_to((g * ii).reshape(kk), a.data.shape))

        return _finish(out, bw)

    # -- shape manipulation -----------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))

        def bw(g, a=self):
            _accum(a, g.reshape(a.data.shape))

        return _finish(out, bw)

    def transpose(self, axes=None) -> "Tensor":
        nd = self.data.ndim
        perm = tuple(reversed(range(nd))) if axes is None else tuple(a % nd for a in axes)
        out = _node(np.transpose(self.data, perm), (self,))
        inv = tuple(np.argsort(perm))

        def bw(g, a=self, iv=inv):
            _accum(a, np.transpose(g, iv))

        return _finish(out, bw)


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward = None
    out._spent = False
    return out


def _finish(out: Tensor, backward_fn) -> Tensor:
    if out.requires_grad:
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Walk the tape from a scalar loss, leaving gradients on the leaves.

    Intermediate gradients are freed during the walk and every visited
    non-leaf node is marked consumed; building a fresh forward graph is
    required before differentiating again.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any tracked tensor")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        if node._spent:
            raise RuntimeError("tape already consumed; rebuild the graph before calling backward")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None:
            continue
        node._backward(node.grad)
        node._spent = True
        node.grad = None


# -- linear algebra and structured ops ---------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    _check_dtype(a, b)
    out = _node(a.data @ b.data, (a, b))

    def bw(g, aa=a, bb=b):
        if aa.requires_grad:
            _accum(aa, g @ bb.data.T)
        if bb.requires_grad:
            _accum(bb, aa.data.T @ g)

    return _finish(out, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat of an empty sequence")
    nd = ts[0].data.ndim
    axis = axis % nd
    for t in ts[1:]:
        _check_dtype(ts[0], t)
        if t.data.ndim != nd:
            raise ValueError("concat rank mismatch")
        for i in range(nd):
            if i != axis and t.data.shape[i] != ts[0].data.shape[i]:
                raise ValueError("concat shape mismatch off the concat axis")
    out = _node(np.concatenate([t.data for t in ts], axis=axis), ts)
    sizes = [t.data.shape[axis] for t in ts]

    def bw(g, tt=tuple(ts), ss=tuple(sizes), ax=axis):
        offset = 0
        index: list = [slice(None)] * g.ndim
        for t, s in zip(tt, ss):
            index[ax] = slice(offset, offset + s)
            _accum(t, g[tuple(index)])
            offset += s

    return _finish(out, bw)


def split(t: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % t.data.ndim
    if sum(sizes) != t.data.shape[axis]:
        raise ValueError("split sizes must cover the axis exactly")
    outs: list[Tensor] = []
    offset = 0
    for s in sizes:
        index: list = [slice(None)] * t.data.ndim
        index[axis] = slice(offset, offset + s)
        piece = _node(t.data[tuple(index)], (t,))

        def bw(g, tt=t, idx=tuple(index)):
            full = np.zeros_like(tt.data)
            full[idx] = g
            _accum(tt, full)

        outs.append(_finish(piece, bw))
        offset += s
    return outs


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with OIHW weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    _check_dtype(x, w)
    if b is not None:
        _check_dtype(x, b)
        if b.data.shape != (cout,):
            raise ValueError("conv2d bias must have shape (out_channels,)")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError("conv2d kernel larger than padded input")
    if padding:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = np.ascontiguousarray(x.data)
    cols = _k.im2col(xpad, kh, kw, stride)
    w2 = w.data.reshape(cout, -1)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out_data = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if b is not None:
        out_data += b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = _node(out_data, parents)

    def bw(g, xx=x, ww=w, bb=b, saved_cols=cols, saved_w2=w2,
           hp=hp, wp=wp, kh=kh, kw=kw, st=stride, pd=padding):
        nn, co = g.shape[0], g.shape[1]
        go = g.reshape(nn, co, -1)
        if bb is not None and bb.requires_grad:
            _accum(bb, g.sum(axis=(0, 2, 3)))
        if ww.requires_grad:
            _accum(ww, np.tensordot(go, saved_cols, ((0, 2), (0, 2))).reshape(ww.data.shape))
        if xx.requires_grad:
            dcols = np.matmul(saved_w2.T, go)
            dxpad = _k.col2im(np.ascontiguousarray(dcols), hp, wp, kh, kw, st)
            dx = dxpad[:, :, pd : hp - pd, pd : wp - pd] if pd else dxpad
            _accum(xx, dx)

    return _finish(out, bw)


def grid_sample(x: Tensor, coords: Tensor, padding: str = "zeros") -> Tensor:
    """Bilinear sampling of NCHW input at absolute pixel coordinates.

    ``coords`` has shape (N, 2, Ho, Wo) with channel 0 holding x (column)
    and channel 1 holding y (row) positions. ``padding="zeros"`` reads zero
    outside the frame; ``"border"`` clamps to the edge. Gradients flow to
    both the input and the coordinates.
    """
    if padding not in ("zeros", "border"):
        raise ValueError(f"unknown padding mode: {padding!r}")
    if x.data.ndim != 4 or coords.data.ndim != 4 or coords.data.shape[1] != 2:
        raise ValueError("grid_sample expects (N,C,H,W) input and (N,2,Ho,Wo) coords")
    if x.data.shape[0] != coords.data.shape[0]:
        raise ValueError("grid_sample batch mismatch")
    _check_dtype(x, coords)
    border = padding == "border"
    cx = np.ascontiguousarray(x.data)
    cc = np.ascontiguousarray(coords.data)
    out = _node(_k.bilinear_gather(cx, cc, border), (x, coords))

    def bw(g, xx=x, cs=coords, cxx=cx, ccc=cc, bd=border):
        gi, gc = _k.bilinear_scatter(np.ascontiguousarray(g), cxx, ccc, bd)
        _accum(xx, gi)
        _accum(cs, gc)

    return _finish(out, bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; trailing odd rows/columns are dropped."""
    if x.data.ndim != 4:
        raise ValueError("avg_pool2 expects a 4-d tensor")
    n, c, h, w = x.data.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ValueError("avg_pool2 input too small to pool")
    xc = x.data[:, :, : 2 * ho, : 2 * wo]
    out = _node(xc.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5)), (x,))

    def bw(g, xx=x, nn=n, cc=c, hh=ho, ww=wo):
        quarter = g * g.dtype.type(0.25)
        expanded = np.empty((nn, cc, hh, 2, ww, 2), dtype=g.dtype)
        expanded[:] = quarter[:, :, :, None, :, None]
        da = np.zeros_like(xx.data)
        da[:, :, : 2 * hh, : 2 * ww] = expanded.reshape(nn, cc, 2 * hh, 2 * ww)
        _accum(xx, da)

    return _finish(out, bw)


_GRID_CACHE: dict[tuple, np.ndarray] = {}


def _upsample_grid(h: int, w: int, scale: int, dtype) -> np.ndarray:
    key = (h, w, scale, np.dtype(dtype).char)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        h2, w2 = h * scale, w * scale
        xs = ((np.arange(w2, dtype=np.float64) + 0.5) / scale - 0.5).astype(dtype)
        ys = ((np.arange(h2, dtype=np.float64) + 0.5) / scale - 0.5).astype(dtype)
        grid = np.empty((1, 2, h2, w2), dtype=dtype)
        grid[0, 0] = xs[None, :]
        grid[0, 1] = ys[:, None]
        _GRID_CACHE[key] = grid
    return grid


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel centers, edge clamp)."""
    if x.data.ndim != 4:
        raise ValueError("upsample_bilinear expects a 4-d tensor")
    scale = int(scale)
    if scale < 1:
        raise ValueError("upsample scale must be >= 1")
    n, _, h, w = x.data.shape
    grid = _upsample_grid(h, w, scale, x.data.dtype)
    coords = np.ascontiguousarray(np.broadcast_to(grid, (n, 2, h * scale, w * scale)))
    cx = np.ascontiguousarray(x.data)
    out = _node(_k.bilinear_gather(cx, coords, True), (x,))

    def bw(g, xx=x, cxx=cx, ccc=coords):
        gi, _ = _k.bilinear_scatter(np.ascontiguousarray(g), cxx, ccc, True)
        _accum(xx, gi)

    return _finish(out, bw)
