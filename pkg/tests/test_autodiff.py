import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from countprompt import autodiff as ad
from countprompt import gradcheck

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_sigmoid_zero():
    t = ad.Tape()
    x = t.leaf(0.0)
    y = ad.sigmoid(x)
    assert y.value == 0.5
    assert ad.backward(y)[x] == 0.25


def test_sum_of_ones():
    t = ad.Tape()
    assert ad.sum(t.leaf(np.ones((2, 2)))).value == 4.0


def test_cosine_self():
    t = ad.Tape()
    v = t.leaf(np.array([0.3, -2.0, 1.5]))
    assert ad.cosine(v, v).value == pytest.approx(1.0, abs=1e-15)


def test_cosine_zero_norm_is_zero():
    t = ad.Tape()
    a, b = t.leaf(np.zeros(3)), t.leaf(np.ones(3))
    c = ad.cosine(a, b)
    g = ad.backward(c)
    assert c.value == 0.0
    assert np.all(g[a] == 0) and np.all(g[b] == 0)


def test_product_rule():
    t = ad.Tape()
    x, y = t.leaf(2.0), t.leaf(3.0)
    g = ad.backward(x * y)
    assert g[x] == 3.0 and g[y] == 2.0


def test_shape_mismatch_names_op_and_shapes():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError, match=r"add.*\(3,\).*\(4,\)"):
        t.record("add", [t.leaf(np.zeros(3)), t.leaf(np.zeros(4))])
    with pytest.raises(ad.ShapeError, match="matmul"):
        t.leaf(np.zeros((2, 3))) @ t.leaf(np.zeros((2, 3)))


def test_unsupported_kind():
    t = ad.Tape()
    with pytest.raises(ValueError, match="unsupported"):
        t.record("fft", [t.leaf(np.zeros(3))])


def test_leaf_limits():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError):
        t.leaf(np.zeros((2, 2, 2)))
    with pytest.raises(ad.ShapeError):
        t.leaf(np.zeros(4097))
    assert t.leaf(np.zeros(4096)).shape == (4096,)


def test_backward_needs_scalar_root():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(t.leaf(np.zeros(2)))


def test_fd_square():
    assert ad.finite_difference(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-4)[0] == \
        pytest.approx(6.0, abs=1e-6)


def test_fd_constant():
    assert np.all(ad.finite_difference(lambda x: 1.5, np.ones(4)) == 0.0)


def test_fd_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        ad.finite_difference(lambda x: 0.0, np.ones(2), 0.0)
    with pytest.raises(ad.NonFiniteError, match="coordinate 1"):
        ad.finite_difference(lambda x: np.inf if x[1] > 1 else 0.0, np.ones(3))


@pytest.mark.parametrize("probe", gradcheck.PROBES, ids=lambda p: p.kind)
def test_op_gradient_100_points(probe):
    rng = np.random.default_rng(abs(hash(probe.kind)) % 2**32)
    worst = max(gradcheck.probe_error(probe, rng) for _ in range(100))
    assert worst < 1e-4


def test_every_registered_op_is_probed():
    assert {p.kind for p in gradcheck.PROBES} == set(ad.OPS)


def test_unreached_nodes_get_zero():
    t = ad.Tape()
    x, y = t.leaf(np.ones(3)), t.leaf(np.full(3, 2.0))
    stray = ad.exp(y)
    g = ad.backward(ad.sum(x * x))
    assert not g.reached(y) and not g.reached(stray)
    assert np.all(g[y] == 0) and g[y].shape == (3,)
    assert np.all(g[stray] == 0)


def test_smooth_abs_flat_at_zero():
    t = ad.Tape()
    x = t.leaf(0.0)
    y = ad.smooth_abs(x)
    assert y.value == pytest.approx(ad.SMOOTH_ABS_EPS)
    assert ad.backward(y)[x] == 0.0


def test_gradient_shapes_match_values():
    t = ad.Tape()
    a, b = t.leaf(np.ones((3, 4))), t.leaf(np.ones(4))
    g = ad.backward(ad.sum(ad.tanh(a @ b)))
    assert g[a].shape == (3, 4) and g[b].shape == (4,)


def _graph(t, x, y):
    return ad.sum(ad.sigmoid(x * y) + ad.tanh(x)), ad.dot(ad.exp(x * 0.1), y)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_linearity_of_gradients(xv, yv):
    t = ad.Tape()
    x, y = t.leaf(xv), t.leaf(yv)
    r1, r2 = _graph(t, x, y)
    g1, g2, g12 = ad.backward(r1), ad.backward(r2), ad.backward(r1 + r2)
    for v in (x, y):
        np.testing.assert_allclose(g12[v], g1[v] + g2[v], rtol=1e-13, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=finite))
def test_replay_is_bitwise_deterministic(xv):
    t = ad.Tape()
    x = t.leaf(xv)
    root = ad.sum(ad.sigmoid(x) * ad.exp(x * 0.5))
    first = [np.array(v, copy=True) for v in t.replay()]
    second = t.replay()
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
    g1 = ad.backward(root)[x]
    g2 = ad.backward(root)[x]
    assert np.array_equal(g1, g2)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite))
def test_dual_hvp_matches_hessian(xv, wv):
    # f = sum(x^3) / 3 + x0 * x1 -> H = diag(2x) + offdiag
    t = ad.Tape()
    x = t.leaf(ad.Dual(xv, wv))
    root = ad.sum(x * x * x) * (1.0 / 3.0) + ad.dot(x, t.const(np.array([0.0, 0.0, 0.0])))
    g = ad.backward(root)[x]
    np.testing.assert_allclose(ad.tangent_of(g), 2 * xv * wv, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ad.value_of(g), xv * xv, rtol=1e-12)


def test_topological_order():
    t = ad.Tape()
    x = t.leaf(np.ones(2))
    ad.sum(ad.exp(x) * x)
    for i, node in enumerate(t.nodes):
        assert all(p < i for p in node.parents)
