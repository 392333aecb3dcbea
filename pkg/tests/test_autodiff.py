import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reverbkit import autodiff as ad
from reverbkit.errors import NumericError, ShapeError

TOL = 1e-4
N_INSTANCES = 5


def _param(rng, *shape, away_from_zero=False):
    v = rng.standard_normal(shape)
    if away_from_zero:
        v = np.sign(v) * (np.abs(v) + 0.1)
    return ad.parameter(v)


def _reduce(out, weights):
    """Scalar probe: weighted sum with fixed random weights."""
    if out.value.ndim == 0:
        return out
    return ad.sum_(ad.mul(out, ad.Tensor(weights)))


def _check(build, params, rng):
    probe = {}

    def fn():
        out = build()
        if "w" not in probe:
            probe["w"] = rng.standard_normal(out.shape) if out.value.ndim else None
        return _reduce(out, probe["w"])

    return ad.gradcheck(fn, params)


def _ops(rng):
    """(name, params, builder) for every differentiable op, fresh random instance."""
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    r = _param(rng, 4)
    m1, m2 = _param(rng, 3, 5), _param(rng, 5, 2)
    x, W, bias = _param(rng, 6, 4), _param(rng, 3, 4), _param(rng, 3)
    k = _param(rng, 3, 4, away_from_zero=True)
    idx = rng.integers(0, 3, 7)
    labels = rng.integers(0, 4, 3)
    t = ad.Tensor(rng.standard_normal((3, 4)))
    lv = _param(rng, 3, 4)
    mp, lvp = _param(rng, 3, 4), _param(rng, 3, 4)
    hx, hh, hc = _param(rng, 2, 3), _param(rng, 2, 4), _param(rng, 2, 4)
    Wl, bl = _param(rng, 16, 7), _param(rng, 16)
    return [
        ("add", {"a": a, "b": b}, lambda: ad.add(a, b)),
        ("sub", {"a": a, "b": b}, lambda: ad.sub(a, b)),
        ("mul", {"a": a, "b": b}, lambda: ad.mul(a, b)),
        ("scale", {"a": a}, lambda: ad.scale(a, -1.7)),
        ("add_row", {"a": a, "r": r}, lambda: ad.add_row(a, r)),
        ("relu", {"k": k}, lambda: ad.relu(k)),
        ("sigmoid", {"a": a}, lambda: ad.sigmoid(a)),
        ("tanh", {"a": a}, lambda: ad.tanh(a)),
        ("exp", {"a": a}, lambda: ad.exp(ad.scale(a, 0.5))),
        ("matmul", {"m1": m1, "m2": m2}, lambda: ad.matmul(m1, m2)),
        ("transpose", {"m1": m1}, lambda: ad.transpose(m1)),
        ("affine", {"x": x, "W": W, "b": bias}, lambda: ad.affine(x, W, bias)),
        ("concat", {"a": a, "b": b}, lambda: ad.concat([a, b], axis=1)),
        ("slice", {"a": a}, lambda: ad.slice_(a, (slice(1, 3), slice(0, 3)))),
        ("gather_rows", {"a": a}, lambda: ad.gather_rows(a, idx)),
        ("sum_axis", {"a": a}, lambda: ad.sum_(a, axis=1)),
        ("mean", {"a": a}, lambda: ad.mean(a)),
        ("softmax_ce", {"a": a}, lambda: ad.softmax_cross_entropy(a, labels)),
        ("mse", {"a": a}, lambda: ad.mse(a, t)),
        ("gaussian_nll", {"a": a, "lv": lv}, lambda: ad.gaussian_nll(t, a, lv)),
        ("kl", {"a": a, "lv": lv, "mp": mp, "lvp": lvp},
         lambda: ad.kl_diag_gaussians(a, lv, mp, lvp)),
        ("lstm_cell", {"x": hx, "h": hh, "c": hc, "W": Wl, "b": bl},
         lambda: ad.add(*ad.lstm_cell(hx, hh, hc, Wl, bl))),
    ]


OP_NAMES = [name for name, _, _ in _ops(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients(name):
    for seed in range(N_INSTANCES):
        rng = np.random.default_rng(seed)
        _, params, build = next(op for op in _ops(rng) if op[0] == name)
        err = _check(build, params, rng)
        assert err < TOL, (name, seed, err)


def test_shared_subgraph_accumulates():
    a = ad.parameter(np.array([1.5, -2.0]))
    y = ad.sum_(ad.mul(a, a))
    z = ad.add(y, ad.sum_(a))
    z.backward()
    np.testing.assert_allclose(a.grad, 2 * a.value + 1)


def test_no_grad_builds_no_graph():
    a = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.sum_(ad.mul(a, a))
    assert not y.requires_grad and y.parents == ()


def test_shape_and_numeric_errors():
    with pytest.raises(ShapeError):
        ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ad.softmax_cross_entropy(ad.Tensor(np.ones((2, 3))), [0, 5])
    with pytest.raises(NumericError):
        ad.exp(ad.Tensor(np.array([1e6])))
    with pytest.raises(ShapeError):
        ad.parameter(np.ones(3)).backward()


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10))
def test_softmax_rows_sum_to_one(values):
    p = ad.softmax(np.array([values]))
    assert abs(p.sum() - 1) < 1e-9


@given(st.floats(0.1, 100.0), st.floats(0.01, 10.0))
def test_clip_never_exceeds_bound(scale, bound):
    rng = np.random.default_rng(0)
    grads = {"a": rng.standard_normal(5) * scale, "b": rng.standard_normal((2, 3)) * scale}
    clipped, norm, new = ad.clip_by_global_norm(grads, bound)
    assert new <= bound + 1e-9
    if norm <= bound:
        assert all(np.array_equal(clipped[k], grads[k]) for k in grads)
    else:
        assert new == pytest.approx(bound, rel=1e-9)


def test_clip_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.clip_by_global_norm({"a": np.array([np.inf])}, 5.0)


def test_sgd_step_and_history():
    p = {"w": ad.parameter(np.array([1.0, 2.0]))}
    p["w"].grad = np.array([30.0, 40.0])  # norm 50 -> clipped to 5
    state = ad.OptimizerState("sgd", 0.1, 5.0)
    ad.sgd_step(p, None, state)
    np.testing.assert_allclose(p["w"].value, [1.0 - 0.1 * 3.0, 2.0 - 0.1 * 4.0])
    h = state.history[-1]
    assert h["grad_norm"] == pytest.approx(50.0) and h["clipped_norm"] == pytest.approx(5.0)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(2)
    w0 = rng.standard_normal(4)
    p = {"w": ad.parameter(w0.copy())}
    state = ad.OptimizerState("adam", 1e-3, None, 0.95, 0.999, 1e-8)
    w, m, v = w0.copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p["w"].grad = g.copy()
        ad.adam_step(p, None, state)
        m = 0.95 * m + 0.05 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-3 * (m / (1 - 0.95 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].value, w, rtol=1e-12)


def test_missing_gradients_refused():
    p = {"w": ad.parameter(np.ones(2))}
    with pytest.raises(NumericError):
        ad.sgd_step(p, None, ad.OptimizerState())


def test_lstm_gate_layout():
    x = ad.Tensor(np.zeros((1, 2)))
    h = ad.Tensor(np.zeros((1, 3)))
    c = ad.Tensor(np.ones((1, 3)))
    W = ad.Tensor(np.zeros((12, 5)))
    b = np.zeros(12)
    b[3:6] = 50.0   # forget gate open
    b[0:3] = -50.0  # input gate shut
    b[6:9] = 50.0   # output gate open
    h1, c1 = ad.lstm_cell(x, h, c, W, ad.Tensor(b))
    np.testing.assert_allclose(c1.value, 1.0, atol=1e-12)
    np.testing.assert_allclose(h1.value, math.tanh(1.0), atol=1e-12)


def test_gradcheck_detects_wrong_gradient():
    a = ad.parameter(np.array([0.3, -0.7]))

    def broken():
        out = ad.sum_(ad.mul(a, a))
        out._backward = lambda g: (3.0 * g * np.ones(2),)
        return out

    assert ad.gradcheck(broken, {"a": a}) > 1e-2
