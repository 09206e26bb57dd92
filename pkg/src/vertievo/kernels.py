"""Kernel dispatch: compiled extension when available, pure Python otherwise.

Set ``VERTIEVO_PURE_PYTHON=1`` before import to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("VERTIEVO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

decode_batch = _impl.decode_batch
order_crossover = _impl.order_crossover
wait_moments = _impl.wait_moments
penalty_sums = _impl.penalty_sums

python = _kernels_py


def compiled():
    """The compiled module, or ``None`` when it is not built."""
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _kernels
