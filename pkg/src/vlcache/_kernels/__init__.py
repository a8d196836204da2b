"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise the
numpy twin takes over. VLCACHE_PURE_PYTHON=1 forces the fallback, which
is handy for benchmarking one against the other.
"""

import os

from . import _numpy_impl

if os.environ.get("VLCACHE_PURE_PYTHON") == "1":
    _impl = _numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _numpy_impl
        BACKEND = "numpy"

stats_tiled = _impl.stats_tiled
decode_step = _impl.decode_step

__all__ = ["BACKEND", "stats_tiled", "decode_step", "_numpy_impl"]
