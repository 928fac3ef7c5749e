"""Hot numeric kernels with a compiled core and a pure numpy fallback.

The compiled Cython extension is preferred when importable; otherwise the
numpy reference backend is used transparently. Set ``EIFLOW_PURE_PY=1`` to
force the fallback (useful for debugging and for the backend benchmark).
"""
from __future__ import annotations

import os

from . import pyref

_force_py = os.environ.get("EIFLOW_PURE_PY", "").strip() not in ("", "0")

if not _force_py:
    try:
        from . import _core  # type: ignore[attr-defined]
    except ImportError:
        _core = None  # type: ignore[assignment]
else:
    _core = None  # type: ignore[assignment]

HAVE_COMPILED = _core is not None
_impl = _core if HAVE_COMPILED else pyref

BACKEND = "compiled" if HAVE_COMPILED else "python"

im2col = _impl.im2col
col2im = _impl.col2im
bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter
voxel_accumulate = _impl.voxel_accumulate

__all__ = [
    "BACKEND",
    "HAVE_COMPILED",
    "bilinear_gather",
    "bilinear_scatter",
    "col2im",
    "im2col",
    "pyref",
    "voxel_accumulate",
]
