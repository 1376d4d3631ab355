import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gflcl import numerics as nx


def _rng(seed=0):
    return np.random.default_rng(seed)


# -- affine ---------------------------------------------------------------------------------


def test_affine_identity():
    out = nx.affine(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_affine_small_case():
    out = nx.affine(np.array([[1.0, 1.0]]), np.array([[2.0], [3.0]]), np.array([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_affine_matches_triple_loop():
    r = _rng(1)
    x, w, b = r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for k in range(4):
                acc += x[i, k] * w[k, j]
            ref[i, j] = acc
    np.testing.assert_allclose(nx.affine(x, w, b).data, ref, atol=1e-12, rtol=0)


def test_affine_shape_error_names_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        nx.affine(np.zeros((3, 4)), np.zeros((5, 2)), np.zeros(2))


# -- layer norm -------------------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(np.array([[5.0, 5, 5, 5]]), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_already_normal_row():
    out = nx.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), epsilon=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-10)


def test_layer_norm_matches_direct_formula():
    r = _rng(2)
    x, g, b = r.standard_normal((2, 8)), r.standard_normal(8), r.standard_normal(8)
    ref = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        ref[i] = [(v - mu) / math.sqrt(var + 1e-5) * gg + bb for v, gg, bb in zip(row, g, b)]
    np.testing.assert_allclose(nx.layer_norm(x, g, b).data, ref, atol=1e-12, rtol=0)


def test_layer_norm_rejects_single_feature():
    with pytest.raises(nx.DegenerateNormalizationError):
        nx.layer_norm(np.ones((3, 1)), np.ones(1), np.zeros(1))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_layer_norm_rows_standardised(x):
    var = x.var(axis=-1)
    if np.any(var < 1e-3):
        return
    eps = 1e-8 * float(var.min())
    out = nx.layer_norm(x, np.ones(6), np.zeros(6), epsilon=eps).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-10)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-6)


# -- softmax --------------------------------------------------------------------------------


@pytest.mark.parametrize("t", [1.0, 0.5, 0.0005])
def test_softmax_symmetric(t):
    np.testing.assert_allclose(nx.softmax_with_temperature(np.zeros(3), t).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_two_logits():
    e = math.e
    np.testing.assert_allclose(nx.softmax_with_temperature(np.array([1.0, 0.0]), 1.0).data,
                               [e / (e + 1), 1 / (e + 1)], atol=1e-15)


def test_softmax_near_hard_max():
    p = nx.softmax_with_temperature(np.array([0.01, 0.0]), 0.0005).data
    assert p[0] > 1 - 1e-8


@pytest.mark.parametrize("t", [0.0, -1.0, float("nan")])
def test_softmax_rejects_bad_temperature(t):
    with pytest.raises(nx.InvalidTemperatureError):
        nx.softmax_with_temperature(np.zeros(3), t)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-5, 5)), st.floats(0.1, 10))
def test_softmax_rows_are_distributions(x, t):
    p = nx.softmax_with_temperature(x, t).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p > 0) and np.all(p <= 1)


def test_softmax_stable_at_paper_temperature():
    p = nx.softmax_with_temperature(np.array([3.0, -2.0, 0.5]), 0.0005).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-300)


# -- cross entropy -----------------------------------------------------------------------------


def test_cross_entropy_uniform():
    assert nx.cross_entropy(np.zeros((1, 4)), [2]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_confident():
    z = np.full((1, 5), -20.0)
    z[0, 3] = 20.0
    assert nx.cross_entropy(z, [3]).item() < 1e-3


def test_cross_entropy_matches_logsumexp():
    r = _rng(3)
    z = r.standard_normal((3, 5))
    t = [4, 0, 2]
    ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(z, t)])
    assert nx.cross_entropy(z, t).item() == pytest.approx(ref, abs=1e-10)


def test_cross_entropy_ignore_index():
    r = _rng(4)
    z = r.standard_normal((4, 6))
    full = nx.cross_entropy(z[:2], [1, 5]).item()
    assert nx.cross_entropy(z, [1, 5, -100, -100], ignore_index=-100).item() == pytest.approx(full, abs=1e-14)


def test_cross_entropy_rejects_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy(np.zeros((2, 3)), [0, 3])


# -- autodiff graph -------------------------------------------------------------------------------


def test_shared_subexpression_accumulates():
    ps = nx.ParameterSet({"x": np.array(3.0)})
    x = ps["x"]
    y = nx.mul(x, x)  # x used twice in one node
    z = nx.add(y, nx.scale(x, 2.0))  # and again elsewhere
    z.backward()
    assert x.grad == pytest.approx(2 * 3.0 + 2.0)


def test_no_grad_builds_no_graph():
    ps = nx.ParameterSet({"x": np.ones(3)})
    with nx.no_grad():
        y = nx.tanh(ps["x"])
    assert not y.requires_grad and y._parents == ()


def test_frozen_parameter_gets_no_gradient():
    ps = nx.ParameterSet({"a": np.ones(2), "b": np.ones(2)})
    ps.freeze("b")
    nx.sum_(nx.mul(ps["a"], ps["b"])).backward()
    assert ps["b"].grad is None
    np.testing.assert_array_equal(ps["a"].grad, np.ones(2))


def test_ops_deterministic():
    r = _rng(5)
    x = r.standard_normal((4, 7))
    a = nx.gelu(nx.layer_norm(x, np.ones(7), np.zeros(7))).data
    b = nx.gelu(nx.layer_norm(x, np.ones(7), np.zeros(7))).data
    assert a.tobytes() == b.tobytes()


# -- AdamW ---------------------------------------------------------------------------------------


def test_adamw_zero_gradient_no_decay_is_identity():
    ps = nx.ParameterSet({"w": np.arange(4.0)})
    st_ = nx.OptimizerState(lr=1e-2, weight_decay=0.0, total_steps=10)
    for _ in range(3):
        ps["w"].grad = np.zeros(4)
        nx.adamw_step(ps, st_)
    np.testing.assert_array_equal(ps["w"].data, np.arange(4.0))
    assert st_.step == 3


def test_warmup_is_linear_then_constant():
    st_ = nx.OptimizerState(lr=1e-4, total_steps=100, warmup_fraction=0.1)
    assert st_.warmup_steps == 10
    assert st_.lr_at(1) == pytest.approx(1e-5)
    assert st_.lr_at(5) == pytest.approx(5e-5)
    assert st_.lr_at(10) == pytest.approx(1e-4)
    assert st_.lr_at(99) == pytest.approx(1e-4)
    rates = [st_.lr_at(s) for s in range(1, 11)]
    assert all(b > a for a, b in zip(rates, rates[1:]))


def test_adamw_matches_hand_stepped_scalar():
    grads = [0.5, -1.0, 2.0, 0.25, -0.75]
    lr, wd, b1, b2, eps = 1e-2, 0.01, 0.9, 0.999, 1e-8
    total, warm = 5, 0.4  # 2 warmup steps
    ps = nx.ParameterSet({"x": np.array(1.5)})
    st_ = nx.OptimizerState(lr=lr, weight_decay=wd, warmup_fraction=warm, total_steps=total)
    x, m, v = 1.5, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        rate = lr * t / 2 if t < 2 else lr
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        x = x - rate * wd * x - rate * mh / (math.sqrt(vh) + eps)
        ps["x"].grad = np.array(g)
        nx.adamw_step(ps, st_)
        assert float(ps["x"].data) == pytest.approx(x, abs=1e-12)


def test_adamw_never_touches_frozen():
    r = _rng(6)
    ps = nx.ParameterSet({"a": r.standard_normal(3), "b": r.standard_normal(3)})
    ps.freeze("b")
    before = ps["b"].data.tobytes()
    st_ = nx.OptimizerState(lr=0.1, total_steps=5)
    for _ in range(5):
        ps["a"].grad = r.standard_normal(3)
        nx.adamw_step(ps, st_)
    assert ps["b"].data.tobytes() == before


def test_adamw_missing_gradient():
    ps = nx.ParameterSet({"a": np.ones(2), "b": np.ones(2)})
    ps["a"].grad = np.ones(2)
    with pytest.raises(nx.IncompleteBackwardError, match="b"):
        nx.adamw_step(ps, nx.OptimizerState(total_steps=1))


def test_adamw_moment_shapes_match():
    ps = nx.ParameterSet({"w": np.ones((2, 3)), "b": np.ones(3)})
    st_ = nx.OptimizerState(total_steps=2)
    for n in ps:
        ps[n].grad = np.ones_like(ps[n].data)
    nx.adamw_step(ps, st_)
    assert st_.m["w"].shape == (2, 3) and st_.v["b"].shape == (3,)


# -- finite differences ----------------------------------------------------------------------------


def test_fd_quadratic():
    ps = nx.ParameterSet({"x": np.array([3.0])})
    err = nx.finite_difference_check(lambda: nx.scale(nx.sum_(nx.square(ps["x"])), 0.5), ps, probes=4)
    assert err < 1e-9


def _scaled_grad_square(a, factor):
    out = a.data**2
    return nx._node(out, (a,), lambda g: (factor * 2 * a.data * g,))


def test_fd_detects_corrupted_gradient():
    ps = nx.ParameterSet({"x": _rng(7).standard_normal(5) + 2.0})
    err = nx.finite_difference_check(lambda: nx.sum_(_scaled_grad_square(ps["x"], 1.1)), ps, probes=16)
    # |1.1 g - g| / (1.1 g) = 1/11
    assert err == pytest.approx(0.1 / 1.1, rel=1e-4)


def test_fd_detects_nondeterminism():
    ps = nx.ParameterSet({"x": np.ones(3)})
    r = _rng(8)
    with pytest.raises(nx.DeterminismError):
        nx.finite_difference_check(lambda: nx.sum_(nx.mul(ps["x"], r.standard_normal(3))), ps)


def test_fd_probes_report_parameter_names():
    ps = nx.ParameterSet({"a": np.ones(3), "b": np.ones(2)})
    res = nx.finite_difference_probes(lambda: nx.sum_(nx.mul(ps["a"], ps["a"])), ps, probes=20, names=["a"])
    assert {r.name for r in res} == {"a"} and len(res) == 20


def test_fd_step_scale_for_tempered_parameter():
    # A parameter entering only through w / t: plain h is too coarse in w / t units
    t = 0.0005
    ps = nx.ParameterSet({"w": 1e-3 * _rng(9).standard_normal(6)})
    r = _rng(10).standard_normal(6)
    loss = lambda: nx.sum_(nx.mul(nx.softmax_with_temperature(ps["w"], t), r))
    coarse = nx.finite_difference_check(loss, ps, probes=32)
    scaled = nx.finite_difference_check(loss, ps, probes=32, step_scale={"w": t})
    assert scaled < 1e-6 < coarse
