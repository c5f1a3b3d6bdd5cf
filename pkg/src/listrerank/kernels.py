"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
kernels take over. Setting ``LISTRERANK_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("LISTRERANK_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

trigram_counts = _impl.trigram_counts
trigram_counts_many = _impl.trigram_counts_many
average_precision_ranked = _impl.average_precision_ranked

__all__ = [
    "BACKEND",
    "trigram_counts",
    "trigram_counts_many",
    "average_precision_ranked",
]
