"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``COUNTPROMPT_PURE_PYTHON=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("COUNTPROMPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


render_blobs = _kernels_py.render_blobs
render_blobs_vjp = _kernels_py.render_blobs_vjp


def correlate_same(image, kernel):
    return _impl.correlate_same(_f64(image), _f64(kernel))


def convolve_same(image, kernel):
    """Adjoint of :func:`correlate_same`."""
    return _impl.correlate_same(_f64(image), _f64(np.asarray(kernel)[::-1, ::-1]))


def local_peaks(response, threshold, min_separation):
    return _impl.local_peaks(_f64(response), float(threshold), float(min_separation))
