"""Kernel backend selection.

Prefers the compiled extension, falls back to the numpy implementation when
the extension was not built. Set CLUECAST_PURE_PYTHON=1 to force the
fallback (used by the benchmark and the backend-equivalence tests).
"""

from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("CLUECAST_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

BACKEND: str = _impl.BACKEND
admissible_actions = _impl.admissible_actions
two_hop_exists = _impl.two_hop_exists
# the delta-constrained variant is exploratory and exists only in python
two_hop_exists_delta = _pykernels.two_hop_exists_delta
