import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vaelab import autodiff as ad
from vaelab.autodiff import Tape, Tensor, backward, grad_check


def central_diff(fn, x, h=1e-5):
    """Independent numerical gradient of a numpy scalar function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def grads_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    _, gs = ad.gradients(lambda: fn(*ts), ts)
    return gs


def test_matmul_identity_and_hand_case():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), b).data, b)
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_is_column_sums_of_b():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    gA, gB = grads_of(lambda a, b: ad.reduce_sum(ad.matmul(a, b)), A, B)
    np.testing.assert_allclose(gA, np.tile(B.sum(axis=1), (3, 1)), rtol=1e-12)
    fd = central_diff(lambda a: (a @ B).sum(), A)
    np.testing.assert_allclose(gA, fd, rtol=1e-6)
    np.testing.assert_allclose(gB, central_diff(lambda b: (A @ b).sum(), B), rtol=1e-6)


def test_sigmoid_and_relu_values():
    assert ad.sigmoid(0.0).data == 0.5
    assert ad.relu(-3.0).data == 0.0
    (g,) = grads_of(lambda x: ad.relu(x), np.array(-3.0))
    assert g == 0.0
    (g0,) = grads_of(lambda x: ad.relu(x), np.array(0.0))
    assert g0 == 0.0


def test_dlog_sigmoid_at_zero():
    (g,) = grads_of(lambda x: ad.log(ad.sigmoid(x)), np.array(0.0))
    fd = central_diff(lambda x: np.log(1 / (1 + np.exp(-x))), np.array(0.0))
    assert g == pytest.approx(0.5, abs=1e-15)
    assert g == pytest.approx(fd, rel=1e-8)


def test_sigmoid_is_stable_far_out():
    s = ad.sigmoid(np.array([-800.0, 800.0])).data
    assert s.tolist() == [0.0, 1.0]


def test_binary_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        ad.elementwise("tanh", np.ones(2))


def test_log_domain():
    with pytest.raises(ValueError):
        ad.log(np.array([1.0, 0.0]))


def test_reductions():
    assert ad.reduce_sum([1.0, 2.0, 3.0]).data == 6.0
    assert ad.reduce_mean(np.full((3, 4), 2.5)).data == 2.5
    (g,) = grads_of(lambda x: ad.reduce_mean(x), np.ones(8))
    np.testing.assert_array_equal(g, np.full(8, 1 / 8))
    with pytest.raises(ValueError):
        ad.reduce_sum(np.ones((2, 2)), axis=2)
    np.testing.assert_array_equal(ad.reduce_sum(np.ones((2, 3)), axis=0).data, [2, 2, 2])


def test_backward_square():
    (g,) = grads_of(lambda x: ad.square(x), np.array(3.0))
    assert g == 6.0


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    with tape:
        y = ad.square(x)
    with pytest.raises(ad.ShapeError):
        backward(y, tape)
    tape = Tape()
    with tape:
        y = ad.reduce_sum(ad.square(x))
    backward(y, tape)
    with pytest.raises(RuntimeError):
        backward(y, tape)


def test_backward_returns_node_map():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tape = Tape()
    with tape:
        loss = ad.reduce_sum(ad.square(x))
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[x.node_id], [2.0, 4.0])
    assert all(inp is None or inp < n.node_id for n in tape.nodes for inp in n.inputs)


def test_sum_sigmoid_wx_against_central_differences():
    rng = np.random.default_rng(1)
    W, x = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    gW, gx = grads_of(lambda w, v: ad.reduce_sum(ad.sigmoid(ad.matmul(w, v))), W, x)
    sig = lambda a: 1 / (1 + np.exp(-a))
    fdW = central_diff(lambda w: sig(w @ x).sum(), W)
    fdx = central_diff(lambda v: sig(W @ v).sum(), x)
    rel = lambda a, b: np.max(np.abs(a - b) / np.maximum(np.maximum(abs(a), abs(b)), 1e-8))
    assert rel(gW, fdW) < 1e-4 and rel(gx, fdx) < 1e-4


def test_determinism_on_independent_tapes():
    def run():
        rng = np.random.default_rng(7)
        W, x = rng.standard_normal((6, 6)), rng.standard_normal((6, 2))
        return grads_of(lambda w: ad.reduce_sum(ad.relu(ad.matmul(w, Tensor(x)))), W)[0]
    assert np.array_equal(run(), run())


def test_grad_check_simple_and_kink():
    assert grad_check(lambda x: ad.reduce_sum(ad.mul(x, x)), np.array([2.0])) < 1e-8
    with pytest.warns(ad.KinkWarning):
        err = grad_check(lambda x: ad.reduce_sum(ad.relu(x)), np.array([0.0, 1.5]))
    assert err < 1e-8
    with pytest.raises(ValueError):
        grad_check(lambda x: ad.reduce_sum(x), np.ones(2), h=0)


PRIMS = {
    "exp": lambda t: ad.exp(t),
    "log": lambda t: ad.log(ad.exp(t)),
    "relu": lambda t: ad.relu(t),
    "sigmoid": lambda t: ad.sigmoid(t),
    "square": lambda t: ad.square(t),
    "add": lambda t: ad.add(t, ad.square(t)),
    "sub": lambda t: ad.sub(ad.exp(t), t),
    "mul": lambda t: ad.mul(t, ad.sigmoid(t)),
    "clip": lambda t: ad.clip(t, -5.0, 5.0),
    "sigmoid_ce": lambda t: ad.sigmoid_cross_entropy(t, np.full(t.shape, 0.3)),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    w = rng.standard_normal(4)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-2, 2, size=4)
        x[np.abs(x) < 1e-3] = 0.5  # keep off the relu kink
        worst = max(worst, grad_check(lambda t: ad.reduce_sum(ad.mul(PRIMS[name](t), w)), x))
    assert worst < 1e-4


def test_structural_ops_gradients():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 6))
    f = lambda t: ad.reduce_sum(ad.mul(ad.concat([t, Tensor(b)], axis=1), w))
    assert grad_check(f, a) < 1e-6
    g = lambda t: ad.reduce_sum(ad.square(ad.columns(t, 1, 3)))
    assert grad_check(g, b) < 1e-6
    bias = rng.standard_normal(4)
    h = lambda t: ad.reduce_sum(ad.square(ad.add_bias(Tensor(b), t)))
    assert grad_check(h, bias) < 1e-6


def test_scalar_operands_broadcast():
    (g,) = grads_of(lambda s: ad.reduce_sum(ad.mul(s, np.arange(4.0))), np.array(2.0))
    assert g == 6.0
    np.testing.assert_array_equal(ad.sub(np.ones(3), 1.0).data, np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-3, 3)),
       st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(x, a, b):
    f = lambda t: ad.reduce_sum(ad.sigmoid(t))
    g = lambda t: ad.reduce_sum(ad.square(t))
    (gf,) = grads_of(f, x)
    (gg,) = grads_of(g, x)
    (gc,) = grads_of(lambda t: ad.add(ad.scale(f(t), a), ad.scale(g(t), b)), x)
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=0, atol=1e-12)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.square(x)
    assert y.node_id is None


def test_debug_mode_flags_non_finite():
    ad.debug_mode(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            ad.exp(np.array([1000.0]))
    finally:
        ad.debug_mode(False)
