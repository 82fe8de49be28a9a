"""Hot-kernel dispatch.

The compiled core (``mcomm._ext._ckernels``) is used when it was built;
otherwise the NumPy fallback is loaded.  Set ``MCOMM_KERNELS=python`` to
force the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MCOMM_KERNELS", "").lower() != "python":
    try:
        from ._ext import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels

ENTROPY_EPS = _pykernels.ENTROPY_EPS
entropy_rows = _impl.entropy_rows
round_stats = _impl.round_stats
count_edges = _impl.count_edges
topk_mask = _impl.topk_mask
tj_observe = _impl.tj_observe


def backends() -> dict:
    """All importable kernel implementations, keyed by name."""
    out = {"python": _pykernels}
    try:
        from ._ext import _ckernels

        out["compiled"] = _ckernels
    except ImportError:
        pass
    return out
