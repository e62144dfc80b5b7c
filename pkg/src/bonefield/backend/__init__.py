"""Grid kernel dispatch: compiled `_fastcore` when available, numpy fallback.

Set BONEFIELD_BACKEND=numpy to force the fallback (used by the parity tests
and the kernel benchmark).
"""

import os

import numpy as np

from . import reference

_FORCED = os.environ.get("BONEFIELD_BACKEND", "").lower()

if _FORCED == "numpy":
    _impl = reference
    _NAME = "numpy"
else:
    try:
        from . import _fastcore as _impl
        _NAME = "fastcore"
    except ImportError:
        _impl = reference
        _NAME = "numpy"


def backend_name():
    return _NAME


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def tri_gather(grid, pts):
    return _impl.tri_gather(_c(grid), _c(pts))


def tri_gather_vjp(grid, pts, g):
    return _impl.tri_gather_vjp(_c(grid), _c(pts), _c(g))


def bone_weight(logits, pts):
    return _impl.bone_weight(_c(logits), _c(pts))


def bone_weight_vjp(logits, pts, g):
    return _impl.bone_weight_vjp(_c(logits), _c(pts), _c(g))
