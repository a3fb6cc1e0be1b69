"""Kernel backend selection.

The compiled extension is preferred when present; set ``DEBLAT_PURE_PYTHON=1``
to force the numpy fallback. Both backends implement the same four routines
with identical semantics (see tests/test_kernels.py for the agreement suite).
"""

import os

from deblat import _pykernels

if os.environ.get("DEBLAT_PURE_PYTHON", "") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from deblat import _cykernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

splat_bilinear = _impl.splat_bilinear
dykstra_project = _impl.dykstra_project
conv2d_direct = _impl.conv2d_direct
closest_point_brute = _impl.closest_point_brute
