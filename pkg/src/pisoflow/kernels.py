"""Kernel lane selection.

The compiled extension is preferred when it imported cleanly; set
``PISOFLOW_PURE=1`` to force the NumPy fallback (used by the lane parity
tests and as an escape hatch on platforms without a compiler).
"""

import os

from . import _kernels_py

if os.environ.get("PISOFLOW_PURE") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels_c as _impl
    except ImportError:
        _impl = _kernels_py

LANE = _impl.LANE
make_pattern = _impl.make_pattern
matvec = _impl.matvec
ilu0_factor = _impl.ilu0_factor
ilu0_solve = _impl.ilu0_solve
