"""Kernel backend selection.

Prefers the compiled extension; falls back to the numpy implementation
when the extension is unavailable or LSMANN_PURE_KERNELS is set.
"""

import os

if os.environ.get("LSMANN_PURE_KERNELS"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND
euclidean = _impl.euclidean
euclidean_batch = _impl.euclidean_batch
simhash_codes = _impl.simhash_codes
collision_counts = _impl.collision_counts
