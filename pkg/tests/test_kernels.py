import importlib
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countprompt import _kernels_py, kernels

try:
    compiled = importlib.import_module("countprompt._kernels")
except ImportError:
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")
    forced = os.environ.get("COUNTPROMPT_PURE_PYTHON", "") in ("1", "true", "yes")
    assert (kernels.BACKEND == "compiled") == (compiled is not None and not forced)


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5, 13]))
def test_correlate_matches_fallback(seed, k):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(20, 17))
    ker = rng.normal(size=(k, k))
    np.testing.assert_allclose(compiled.correlate_same(img, ker), _kernels_py.correlate_same(img, ker),
                               rtol=1e-12, atol=1e-12)


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.8), st.floats(1.0, 6.0))
def test_peaks_match_fallback(seed, thr, sep):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (24, 24))
    img[rng.integers(24), :] = 0.5          # plateaus exercise the tie rule
    a = compiled.local_peaks(img, thr, sep)
    b = _kernels_py.local_peaks(img, thr, sep)
    assert np.array_equal(np.asarray(a), b)


def test_local_peaks_semantics():
    r = np.zeros((10, 10))
    r[2, 2], r[2, 5], r[7, 7] = 1.0, 0.9, 0.4
    np.testing.assert_array_equal(kernels.local_peaks(r, 0.5, 1.0), [[2, 2], [2, 5]])
    np.testing.assert_array_equal(kernels.local_peaks(r, 0.5, 4.0), [[2, 2]])
    np.testing.assert_array_equal(kernels.local_peaks(r, 0.1, 4.0), [[2, 2], [7, 7]])
    assert kernels.local_peaks(np.zeros((5, 5)), 0.1, 4.0).shape == (0, 2)


def test_convolve_is_adjoint_of_correlate():
    rng = np.random.default_rng(0)
    x, y, k = rng.normal(size=(9, 9)), rng.normal(size=(9, 9)), rng.normal(size=(3, 3))
    assert np.sum(kernels.correlate_same(x, k) * y) == pytest.approx(
        np.sum(x * kernels.convolve_same(y, k)), rel=1e-12)


def test_render_peak():
    img = kernels.render_blobs(np.array([0.7]), np.array([[5.0, 8.0]]), 2.0, 16, 16)
    assert img[8, 5] == pytest.approx(0.7)
