"""Kernel dispatch: compiled extension when importable, fallback otherwise.

Set ``BRMIL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py as fallback

compiled = None
if os.environ.get("BRMIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "python"

esa_scan = _impl.esa_scan
bin_topm = _impl.bin_topm
