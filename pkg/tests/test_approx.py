import numpy as np
import pytest
from hypothesis import given, strategies as st

from recoverkit import approx
from recoverkit.approx import MLP, NetSpec


def fd_grad(f, p, h=1e-5):
    g = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f(p - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def test_zero_params_give_zero_output():
    spec = NetSpec(3, (4, 5), 2)
    out = approx.forward(spec, np.zeros(spec.param_count), np.array([0.3, -1.0, 2.0]))
    assert np.array_equal(out, np.zeros(2))


def test_one_one_one_net_hand_value():
    spec = NetSpec(1, (1,), 1)
    params = np.array([1.0, 0.0, 1.0, 0.0])     # W1, b1, W2, b2
    assert approx.forward(spec, params, np.array([0.5]))[0] == pytest.approx(np.tanh(0.5), abs=1e-12)
    assert approx.forward(spec, params, np.array([0.5]))[0] == pytest.approx(0.46212, abs=1e-5)


def test_tanh_output_stays_in_open_interval():
    spec = NetSpec(1, (), 1, output_activation="tanh")
    out = approx.forward(spec, np.array([1e3, 0.0]), np.array([0.5]))
    assert -1.0 < out[0] <= 1.0 and out[0] > 0.99


def test_dimension_mismatch_rejected():
    with pytest.raises(approx.DimensionError):
        approx.forward(NetSpec(3, (2,), 1), np.zeros(NetSpec(3, (2,), 1).param_count), np.zeros(2))


def test_zero_upstream_zero_gradient():
    spec = NetSpec(3, (4,), 2)
    p = approx.init_params(spec, np.random.default_rng(0))
    assert np.array_equal(approx.grad_params(spec, p, np.ones(3), np.zeros(2)), np.zeros(spec.param_count))


def test_grad_params_matches_finite_differences_componentwise():
    rng = np.random.default_rng(1)
    spec = NetSpec(3, (5, 4), 2, output_activation="tanh")
    p = approx.init_params(spec, rng)
    x, up = rng.standard_normal(3), rng.standard_normal(2)
    g = approx.grad_params(spec, p, x, up)
    fd = fd_grad(lambda q: up @ approx.forward(spec, q, x), p)
    assert rel_err(g, fd) < 1e-4


def test_grad_input_matches_finite_differences():
    rng = np.random.default_rng(2)
    spec = NetSpec(4, (6,), 3)
    p = approx.init_params(spec, rng)
    x, up = rng.standard_normal(4), rng.standard_normal(3)
    g = approx.grad_input(spec, p, x, up)
    fd = fd_grad(lambda xx: up @ approx.forward(spec, p, xx), x)
    assert rel_err(g, fd) < 1e-4


def test_output_bias_gradient_equals_upstream():
    spec = NetSpec(2, (3,), 2)
    p = approx.init_params(spec, np.random.default_rng(3))
    up = np.array([0.7, -1.3])
    g = approx.grad_params(spec, p, np.array([0.1, 0.2]), up)
    assert np.array_equal(g[-2:], up)


def test_zero_weights_zero_input_gradient():
    spec = NetSpec(3, (4,), 1)
    assert np.array_equal(approx.grad_input(spec, np.zeros(spec.param_count), np.ones(3), np.ones(1)), np.zeros(3))


def test_input_gradient_permutes_with_symmetric_inputs():
    spec = NetSpec(2, (3,), 1)
    p = approx.init_params(spec, np.random.default_rng(4))
    W1 = p[:6].reshape(2, 3)
    W1[1] = W1[0]                                # identical rows: inputs enter symmetrically
    p[:6] = W1.ravel()
    g = approx.grad_input(spec, p, np.array([0.3, -0.4]), np.ones(1))
    g_swapped = approx.grad_input(spec, p, np.array([-0.4, 0.3]), np.ones(1))
    assert np.allclose(g, g_swapped[::-1], atol=1e-15)


def test_non_finite_activation_reports_layer():
    spec = NetSpec(1, (1,), 1)
    with pytest.raises(approx.NumericalError) as info:
        approx.grad_params(spec, np.array([np.nan, 0.0, 1.0, 0.0]), np.array([1.0]), np.ones(1))
    assert info.value.layer == 0


def test_sgd_arithmetic_and_zero_gradient():
    st_ = approx.OptimizerState("sgd", 0.1, 1)
    assert approx.optimizer_step(st_, np.array([1.0]), np.array([2.0]))[0] == pytest.approx(0.8, abs=1e-12)
    assert approx.optimizer_step(st_, np.array([1.0]), np.array([0.0]))[0] == 1.0


def test_adam_first_step_hand_computation():
    lr, g = 0.01, np.array([0.5, -2.0, 0.0])
    st_ = approx.OptimizerState("adam", lr, 3)
    out = approx.optimizer_step(st_, np.zeros(3), g)
    # bias-corrected moments on step one are g and g**2
    expected = -lr * g / (np.abs(g) + 1e-8)
    assert np.allclose(out, expected, rtol=0, atol=1e-15)


def test_non_finite_gradient_refused():
    st_ = approx.OptimizerState("adam", 0.1, 2)
    with pytest.raises(approx.NumericalError):
        approx.optimizer_step(st_, np.zeros(2), np.array([np.nan, 0.0]))
    assert st_.step_count == 0


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.sampled_from(["sgd", "adam"]))
def test_ascend_negates_descend(params, grad, kind):
    p, g = np.array(params), np.array(grad)
    down = approx.optimizer_step(approx.OptimizerState(kind, 0.1, 3), np.zeros(3), g)
    up = approx.optimizer_step(approx.OptimizerState(kind, 0.1, 3), np.zeros(3), g, ascend=True)
    assert np.array_equal(up, -down)
    # from any start the ascent step equals descent along the negated gradient
    a = approx.optimizer_step(approx.OptimizerState(kind, 0.1, 3), p, g, ascend=True)
    b = approx.optimizer_step(approx.OptimizerState(kind, 0.1, 3), p, -g)
    assert np.array_equal(a, b)


def test_target_sync_modes():
    live, tgt = np.array([2.0]), np.array([0.0])
    assert np.array_equal(approx.target_sync(live, tgt), live)
    assert np.array_equal(approx.target_sync(live, tgt, "polyak", 1.0), live)
    assert approx.target_sync(live, tgt, "polyak", 0.5)[0] == 1.0


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    spec = NetSpec(5, (7, 3), 2, output_activation="tanh", seed=9)
    p = rng.standard_normal(spec.param_count) * 1e3 / 7.0
    approx.save_net(spec, p, tmp_path / "net.json")
    spec2, p2 = approx.load_net(tmp_path / "net.json")
    assert spec2 == spec and np.array_equal(p2, p)
    x = rng.standard_normal((100, 5))
    assert np.array_equal(approx.forward(spec, p, x), approx.forward(spec2, p2, x))


def test_mismatched_declared_dims_is_format_error(tmp_path):
    spec = NetSpec(2, (3,), 1)
    doc = approx.net_to_dict(spec, np.zeros(spec.param_count))
    doc["spec"]["input_dim"] = 4
    with pytest.raises(approx.NetFormatError):
        approx.net_from_dict(doc)


@given(st.integers(1, 6), st.lists(st.integers(1, 6), max_size=3), st.integers(1, 4))
def test_param_count_formula(inp, hidden, out):
    spec = NetSpec(inp, tuple(hidden), out)
    sizes = [inp, *hidden, out]
    assert spec.param_count == sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))
    assert approx.init_params(spec, np.random.default_rng(0)).size == spec.param_count


@given(st.integers(0, 2 ** 31 - 1))
def test_forward_is_pure(seed):
    rng = np.random.default_rng(seed)
    spec = NetSpec(3, (4,), 2)
    p, x = approx.init_params(spec, rng), rng.standard_normal((5, 3))
    assert np.array_equal(approx.forward(spec, p, x), approx.forward(spec, p.copy(), x.copy()))


@given(st.integers(0, 2 ** 31 - 1))
def test_batched_backward_sums_single_gradients(seed):
    rng = np.random.default_rng(seed)
    spec = NetSpec(3, (4,), 2)
    net = MLP(spec, approx.init_params(spec, rng))
    x, up = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    _, cache = net.forward_cache(x)
    total = net.backward(cache, up)
    single = sum(approx.grad_params(spec, net.params, x[i], up[i]) for i in range(4))
    assert np.allclose(total, single, atol=1e-12)
