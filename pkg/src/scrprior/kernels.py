"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting
``SCRPRIOR_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("SCRPRIOR_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def raycast_rectangles(origin, dirs, rect_o, rect_u, rect_v, impl=None):
    impl = impl or _impl
    return impl.raycast_rectangles(_c64(origin), _c64(dirs), _c64(rect_o), _c64(rect_u), _c64(rect_v))


def nearest_sqdist(a, b, impl=None):
    impl = impl or _impl
    return impl.nearest_sqdist(_c64(a), _c64(b))


def count_inliers(rotations, translations, k4, points, pixels, threshold, min_depth=0.0, impl=None):
    impl = impl or _impl
    return impl.count_inliers(_c64(rotations), _c64(translations), _c64(k4), _c64(points),
                              _c64(pixels), float(threshold), float(min_depth))


def available_backends():
    backends = {"python": _kernels_py}
    if BACKEND == "cython":
        backends["cython"] = _impl
    return backends
