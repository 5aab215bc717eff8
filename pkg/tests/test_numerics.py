import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tdvit.errors import ConfigError
from tdvit.numerics import (
    INIT_STD,
    LayerNormParams,
    LinearParams,
    MLPParams,
    Tensor,
    concat,
    count_parameters,
    cross_entropy,
    gelu,
    grad_check,
    init_linear,
    init_mlp,
    layer_norm,
    linear,
    mlp_forward,
    named_parameters,
    no_grad,
    pad,
    softmax,
    trunc_normal,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def lin(w, b):
    return LinearParams(Tensor(np.asarray(w, float)), Tensor(np.asarray(b, float)))


# ------------------------------------------------------------------ linear

def test_linear_zero_input_gives_zero():
    p = lin(np.random.default_rng(0).standard_normal((3, 5)), np.zeros(5))
    assert np.array_equal(linear(Tensor(np.zeros((2, 3))), p).data, np.zeros((2, 5)))


def test_linear_identity():
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert np.array_equal(linear(Tensor(x), lin(np.eye(3), np.zeros(3))).data, x)


def test_linear_hand_example():
    y = linear(Tensor([[1.0, 2.0]]), lin([[1, 0], [0, 1]], [1, -1]))
    assert y.data.tolist() == [[2.0, 1.0]]


def test_linear_rejects_wrong_width():
    with pytest.raises(ConfigError):
        linear(Tensor(np.zeros((2, 4))), lin(np.eye(3), np.zeros(3)))


# -------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    y = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.array_equal(y.data, np.zeros((1, 3)))


def test_layer_norm_zero_gamma_gives_beta():
    b = np.array([0.5, -1.0, 2.0, 7.0])
    x = np.random.default_rng(2).standard_normal((5, 4))
    y = layer_norm(Tensor(x), Tensor(np.zeros(4)), Tensor(b))
    assert np.array_equal(y.data, np.broadcast_to(b, (5, 4)))


def test_layer_norm_hand_example():
    # mean 2, population std sqrt(2/3)
    y = layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    s = math.sqrt(2 / 3)
    np.testing.assert_allclose(y.data, [[-1 / s, 0.0, 1 / s]], atol=1e-12)
    np.testing.assert_allclose(y.data, [[-1.2247, 0.0, 1.2247]], atol=1e-4)


@given(arrays(np.float64, (3, 6), elements=finite))
def test_layer_norm_pre_affine_rows_have_zero_mean(x):
    y = layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.all(np.abs(y.data.mean(axis=-1)) <= 1e-12)


# -------------------------------------------------------------------- gelu

def test_gelu_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_matches_normal_cdf_oracle():
    # x * Phi(x) with Phi from the standard library
    xs = np.array([-3.0, -1.0, -0.25, 0.5, 1.0, 2.5])
    oracle = [x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs]
    np.testing.assert_allclose(gelu(Tensor(xs)).data, oracle, rtol=1e-14, atol=1e-15)
    assert gelu(Tensor([1.0])).data[0] == pytest.approx(0.841345, abs=1e-6)


def test_gelu_asymptotes():
    assert gelu(Tensor([40.0])).data[0] == pytest.approx(40.0, abs=1e-12)
    assert abs(gelu(Tensor([-40.0])).data[0]) < 1e-12


# ----------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.full(5, 3.0))).data, np.full(5, 0.2), atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_handles_large_logits():
    y = softmax(Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(y.data, [0.5, 0.5])


@given(arrays(np.float64, (4, 7), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariance_and_row_sums(x, c):
    y = softmax(Tensor(x)).data
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, y, atol=1e-14)
    assert np.all(np.abs(y.sum(axis=-1) - 1) <= 1e-12)


# --------------------------------------------------------------------- mlp

def test_mlp_zero_weights():
    p = MLPParams(lin(np.zeros((3, 12)), np.zeros(12)), lin(np.zeros((12, 3)), np.zeros(3)))
    x = np.random.default_rng(3).standard_normal((2, 3))
    assert np.array_equal(mlp_forward(Tensor(x), p).data, np.zeros((2, 3)))


def test_mlp_zero_second_layer_gives_bias_rows():
    rng = np.random.default_rng(4)
    b = np.array([1.0, -2.0, 0.5])
    p = MLPParams(lin(rng.standard_normal((3, 12)), rng.standard_normal(12)), lin(np.zeros((12, 3)), b))
    y = mlp_forward(Tensor(rng.standard_normal((4, 3))), p)
    assert np.array_equal(y.data, np.broadcast_to(b, (4, 3)))


def test_mlp_matches_scalar_loop_oracle():
    rng = np.random.default_rng(5)
    p = init_mlp(rng, 4, 4, std=0.5)
    for t in (p.fc1.bias, p.fc2.bias):
        t.data[...] = rng.standard_normal(t.shape)
    x = rng.standard_normal((2, 4))
    w1, b1, w2, b2 = (t.data for t in (p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias))
    oracle = np.zeros((2, 4))
    for n in range(2):
        hidden = []
        for j in range(16):
            a = b1[j] + sum(x[n, i] * w1[i, j] for i in range(4))
            hidden.append(a * 0.5 * (1 + math.erf(a / math.sqrt(2))))
        for o in range(4):
            oracle[n, o] = b2[o] + sum(hidden[j] * w2[j, o] for j in range(16))
    np.testing.assert_allclose(mlp_forward(Tensor(x), p).data, oracle, rtol=1e-12, atol=1e-12)


# ----------------------------------------------------------- cross entropy

def test_cross_entropy_matches_log_softmax_oracle():
    z = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 3.0]])
    t = np.array([1, 0])
    oracle = np.mean([-(z[i, t[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(2)])
    assert cross_entropy(Tensor(z), t).item() == pytest.approx(oracle, abs=1e-14)


# ------------------------------------------------------------- autodiff core

def test_backward_accumulates_shared_parents():
    x = Tensor([2.0, -1.0], requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [7.0, 1.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y._backward is None


def test_pad_and_concat_gradients():
    rng = np.random.default_rng(6)
    a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 2)))
    assert grad_check(lambda a, b: pad(concat([a, b], axis=-1), ((1, 0), (0, 2))), [a, b]) <= 1e-8


def test_grad_check_spec_examples():
    rng = np.random.default_rng(7)
    p = init_linear(rng, 3, 3, std=1.0)
    x = Tensor(rng.standard_normal((3, 3)))
    assert grad_check(lambda x, w, b: linear(x, p), [x, p.weight, p.bias]) <= 1e-7
    ln = LayerNormParams(Tensor(rng.standard_normal(8)), Tensor(rng.standard_normal(8)))
    x = Tensor(rng.standard_normal((4, 8)))
    assert grad_check(lambda x, g, b: layer_norm(x, g, b), [x, ln.gamma, ln.beta]) <= 1e-5


def test_grad_check_detects_wrong_gradient(monkeypatch):
    import tdvit.numerics as nm

    monkeypatch.setattr(nm, "_gelu_grad", lambda x: np.ones_like(x))
    assert grad_check(gelu, [Tensor(np.linspace(-2, 2, 5))]) > 1e-2


def test_grad_check_reports_inf_for_non_finite_gradient(monkeypatch):
    import tdvit.numerics as nm

    monkeypatch.setattr(nm, "_gelu_grad", lambda x: np.full_like(x, np.nan))
    assert grad_check(gelu, [Tensor([0.3])]) == math.inf


@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_forward_ops_are_deterministic(x):
    a = gelu(layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))).data
    b = gelu(layer_norm(Tensor(x.copy()), Tensor(np.ones(3)), Tensor(np.zeros(3)))).data
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------ initialisers

def test_trunc_normal_bounds_and_scale():
    w = trunc_normal(np.random.default_rng(8), (200, 200))
    assert np.all(np.abs(w) <= 2 * INIT_STD)
    # a normal truncated at two standard deviations keeps about 88% of its variance
    assert w.std() == pytest.approx(0.8796 * INIT_STD, rel=0.02)


def test_init_linear_zero_bias_and_parameter_walk():
    p = init_mlp(np.random.default_rng(9), 4, 4)
    assert np.array_equal(p.fc1.bias.data, np.zeros(16))
    names = [n for n, _ in named_parameters(p)]
    assert names == ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    assert count_parameters(p) == 4 * 16 + 16 + 16 * 4 + 4
