import logging

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import ifa.attention as attn
from conftest import central_diff, rel_err
from ifa.attention import (
    AttentionParams,
    dense_kernel_attention_oracle,
    dense_kernel_weights,
    dense_softmax_attention,
    kernel_apply,
    linear_attention_backward,
    linear_attention_forward,
    softmax_attention_weights,
    target_attention_backward,
    target_attention_forward,
)
from ifa.errors import DimensionError, UsageError
from ifa.numeric import GradPair

KERNELS = ["softplus", "relu_eps"]


def make(rng, m, n, d_in=5, d=4, d_v=None, scale=1.0):
    p = AttentionParams.init(rng, d_in, d_in, d_in, d, d_v)
    EQ = rng.normal(0, scale, (m, d_in))
    EK = rng.normal(0, scale, (n, d_in))
    EV = rng.normal(0, scale, (n, d_in))
    return p, EQ, EK, EV


def identity_params(d):
    return AttentionParams(GradPair(np.eye(d)), GradPair(np.eye(d)), GradPair(np.eye(d)))


def test_softplus_at_zero():
    assert kernel_apply("softplus", np.array([0.0]))[0] == pytest.approx(np.log(2.0), abs=1e-15)


def test_relu_eps_floor():
    assert kernel_apply("relu_eps", np.array([-5.0]))[0] == 1e-6


def test_softplus_large_argument_matches_high_precision():
    mpmath.mp.dps = 50
    exact = float(mpmath.log(1 + mpmath.exp(30)))
    got = kernel_apply("softplus", np.array([30.0]))[0]
    assert abs(got - exact) < 1e-9
    assert np.isfinite(kernel_apply("softplus", np.array([1000.0, -1000.0]))).all()


@pytest.mark.parametrize("kernel", KERNELS)
def test_kernel_is_nonnegative(kernel, rng):
    x = rng.normal(0, 50, 1000)
    assert np.all(kernel_apply(kernel, x) > 0)


@pytest.mark.parametrize("kernel", KERNELS)
def test_single_key_copies_value(kernel, rng):
    p, EQ, EK, EV = make(rng, 6, 1)
    out = linear_attention_forward(EQ, EK, EV, p, kernel).output
    V = EV @ p.W_V.value
    np.testing.assert_allclose(out, np.repeat(V, 6, axis=0), rtol=1e-12)


@pytest.mark.parametrize("kernel", KERNELS)
def test_identical_keys_average_values(kernel, rng):
    p, EQ, _, EV = make(rng, 4, 7)
    EK = np.repeat(rng.normal(size=(1, 5)), 7, axis=0)
    out = linear_attention_forward(EQ, EK, EV, p, kernel).output
    mean = (EV @ p.W_V.value).mean(axis=0)
    np.testing.assert_allclose(out, np.tile(mean, (4, 1)), rtol=1e-12)


@pytest.mark.parametrize("kernel", KERNELS)
def test_linear_matches_dense_oracle(kernel, rng):
    p, EQ, EK, EV = make(rng, 8, 16, d=4)
    fast = linear_attention_forward(EQ, EK, EV, p, kernel).output
    slow = dense_kernel_attention_oracle(EQ, EK, EV, p, kernel)
    assert np.max(np.abs(fast - slow) / np.maximum(np.abs(slow), 1e-300)) < 1e-10


def test_oracle_hand_example_relu_eps():
    eps = 1e-6
    p = identity_params(2)
    EQ = np.array([[1.0, 2.0]])
    EK = np.array([[1.0, 0.0], [0.0, 1.0]])
    EV = np.array([[3.0, -1.0], [5.0, 7.0]])
    w1 = (1 + eps) * (1 + eps) + (2 + eps) * eps
    w2 = (1 + eps) * eps + (2 + eps) * (1 + eps)
    a1, a2 = w1 / (w1 + w2), w2 / (w1 + w2)
    assert a1 == pytest.approx(1 / 3, abs=1e-5) and a2 == pytest.approx(2 / 3, abs=1e-5)
    W = dense_kernel_weights(EQ, EK, p, "relu_eps")
    np.testing.assert_allclose(W, [[a1, a2]], rtol=1e-14)
    expected = a1 * EV[0] + a2 * EV[1]
    np.testing.assert_allclose(dense_kernel_attention_oracle(EQ, EK, EV, p, "relu_eps"), [expected], rtol=1e-14)
    np.testing.assert_allclose(linear_attention_forward(EQ, EK, EV, p, "relu_eps").output, [expected], rtol=1e-12)


@pytest.mark.parametrize("kernel", KERNELS)
def test_oracle_weights_rows_sum_to_one_and_nonnegative(kernel, rng):
    p, EQ, EK, _ = make(rng, 9, 13, scale=2.0)
    W = dense_kernel_weights(EQ, EK, p, kernel)
    assert np.all(W >= 0)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)


def test_oracle_size_guard(rng):
    p = AttentionParams.init(rng, 1, 1, 1, 1)
    with pytest.raises(UsageError):
        dense_kernel_attention_oracle(np.zeros((4000, 1)), np.zeros((3000, 1)), np.zeros((3000, 1)), p)


def test_shape_errors(rng):
    p, EQ, EK, EV = make(rng, 3, 4)
    with pytest.raises(DimensionError):
        linear_attention_forward(EQ[:, :3], EK, EV, p)
    with pytest.raises(DimensionError):
        linear_attention_forward(EQ, EK, EV[:2], p)
    with pytest.raises(DimensionError):
        dense_softmax_attention(EQ, EK[:, :2], EV, p)
    with pytest.raises(DimensionError):
        AttentionParams(GradPair(np.ones((2, 3))), GradPair(np.ones((2, 4))), GradPair(np.ones((2, 2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from(KERNELS), st.integers(0, 2**31))
def test_normalization_with_unit_values(m, n, kernel, seed):
    g = np.random.default_rng(seed)
    p = AttentionParams(GradPair(g.normal(size=(3, 4))), GradPair(g.normal(size=(3, 4))), GradPair(np.ones((1, 5))))
    out = linear_attention_forward(g.normal(size=(m, 3)), g.normal(size=(n, 3)), np.ones((n, 1)), p, kernel).output
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.sampled_from(KERNELS), st.integers(0, 2**31))
def test_permutation_symmetries(m, n, kernel, seed):
    g = np.random.default_rng(seed)
    p, EQ, EK, EV = make(g, m, n)
    base = linear_attention_forward(EQ, EK, EV, p, kernel).output
    kv = g.permutation(n)
    np.testing.assert_allclose(linear_attention_forward(EQ, EK[kv], EV[kv], p, kernel).output, base, rtol=1e-12, atol=1e-14)
    qp = g.permutation(m)
    np.testing.assert_allclose(linear_attention_forward(EQ[qp], EK, EV, p, kernel).output, base[qp], rtol=1e-12, atol=1e-14)


def test_unnormalized_path_matches_unnormalized_oracle(rng):
    p, EQ, EK, EV = make(rng, 5, 9)
    fast = linear_attention_forward(EQ, EK, EV, p, "softplus", normalize=False).output
    slow = dense_kernel_attention_oracle(EQ, EK, EV, p, "softplus", normalize=False)
    np.testing.assert_allclose(fast, slow, rtol=1e-10)


def test_degree_floor_warns(rng, monkeypatch, caplog):
    p, EQ, EK, EV = make(rng, 3, 4)
    monkeypatch.setattr(attn, "kernel_apply", lambda kind, x: np.zeros_like(x))
    with caplog.at_level(logging.WARNING, logger="ifa.attention"):
        out = linear_attention_forward(EQ, EK, EV, p, "softplus")
    assert "degree floor" in caplog.text
    assert np.all(np.isfinite(out.output))
    assert out.cache.floored.all()


# --------------------------------------------------------------------------
# backward


@pytest.mark.parametrize("kernel", KERNELS)
def test_backward_zero_cotangent(kernel, rng):
    p, EQ, EK, EV = make(rng, 3, 4)
    res = linear_attention_forward(EQ, EK, EV, p, kernel)
    grads = linear_attention_backward(np.zeros_like(res.output), res.cache)
    assert all(not g.any() for g in grads)
    assert all(not gp.grad.any() for gp in p.pairs())


@pytest.mark.parametrize("kernel", KERNELS)
@pytest.mark.parametrize("normalize", [True, False])
def test_backward_finite_differences(kernel, normalize, rng):
    p = AttentionParams.init(rng, 3, 3, 3, 2)
    EQ, EK, EV = rng.normal(size=(2, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    cot = rng.normal(size=(2, 2))

    def f():
        return float(np.sum(cot * linear_attention_forward(EQ, EK, EV, p, kernel, normalize).output))

    res = linear_attention_forward(EQ, EK, EV, p, kernel, normalize)
    dq, dk, dv = linear_attention_backward(cot, res.cache)
    for analytic, x in ((dq, EQ), (dk, EK), (dv, EV)):
        assert rel_err(analytic, central_diff(f, x)) < 1e-5
    for gp in p.pairs():
        assert rel_err(gp.grad, central_diff(f, gp.value)) < 1e-5


def test_value_gradient_matches_explicit_weights(rng):
    p, EQ, EK, EV = make(rng, 6, 9)
    cot = rng.normal(size=(6, 4))
    res = linear_attention_forward(EQ, EK, EV, p, "softplus")
    _, _, dv = linear_attention_backward(cot, res.cache)
    A = dense_kernel_weights(EQ, EK, p, "softplus")
    np.testing.assert_allclose(dv, A.T @ cot @ p.W_V.value.T, atol=1e-9)


def test_backward_rejects_reused_cache(rng):
    p, EQ, EK, EV = make(rng, 2, 3)
    res = linear_attention_forward(EQ, EK, EV, p)
    linear_attention_backward(np.ones_like(res.output), res.cache)
    with pytest.raises(UsageError):
        linear_attention_backward(np.ones_like(res.output), res.cache)
    with pytest.raises(UsageError):
        linear_attention_backward(np.ones_like(res.output), object())


# --------------------------------------------------------------------------
# dense softmax and gathered target attention


def test_softmax_single_key(rng):
    p, EQ, EK, EV = make(rng, 5, 1)
    np.testing.assert_allclose(dense_softmax_attention(EQ, EK, EV, p), np.repeat(EV @ p.W_V.value, 5, 0), rtol=1e-12)


def test_softmax_uniform_scores_give_mean(rng):
    p, EQ, EK, EV = make(rng, 4, 6)
    p.W_Q.value[...] = 0.0
    out = dense_softmax_attention(EQ, EK, EV, p)
    np.testing.assert_allclose(out, np.tile((EV @ p.W_V.value).mean(0), (4, 1)), rtol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    p, EQ, EK, _ = make(rng, 7, 11, scale=3.0)
    np.testing.assert_allclose(softmax_attention_weights(EQ, EK, p).sum(axis=1), 1.0, atol=1e-12)


def test_target_attention_full_index_equals_dense(rng):
    p, EQ, EK, _ = make(rng, 4, 6)
    index = np.tile(np.arange(6), (4, 1))
    out, _ = target_attention_forward(EQ, EK, index, np.ones_like(index, bool), p)
    np.testing.assert_allclose(out, dense_softmax_attention(EQ, EK, EK, p), rtol=1e-12)


def test_target_attention_subsets_and_empty_rows(rng):
    p, EQ, EK, _ = make(rng, 3, 6)
    index = np.array([[1, 4, 0], [2, 0, 0], [0, 0, 0]])
    mask = np.array([[True, True, False], [True, False, False], [False, False, False]])
    out, _ = target_attention_forward(EQ, EK, index, mask, p)
    np.testing.assert_allclose(out[0], dense_softmax_attention(EQ[:1], EK[[1, 4]], EK[[1, 4]], p)[0], rtol=1e-12)
    np.testing.assert_allclose(out[1], (EK[2] @ p.W_V.value), rtol=1e-12)
    assert not out[2].any()


def test_target_attention_backward_finite_differences(rng):
    p = AttentionParams.init(rng, 3, 3, 3, 2)
    EQ, EKV = rng.normal(size=(3, 3)), rng.normal(size=(5, 3))
    index = np.array([[0, 3, 3], [4, 1, 0], [0, 0, 0]])
    mask = np.array([[True, True, True], [True, True, False], [False, False, False]])
    cot = rng.normal(size=(3, 2))

    def f():
        return float(np.sum(cot * target_attention_forward(EQ, EKV, index, mask, p)[0]))

    _, cache = target_attention_forward(EQ, EKV, index, mask, p)
    dq, dkv = target_attention_backward(cot, cache)
    assert rel_err(dq, central_diff(f, EQ)) < 1e-5
    assert rel_err(dkv, central_diff(f, EKV)) < 1e-5
    for gp in p.pairs():
        assert rel_err(gp.grad, central_diff(f, gp.value)) < 1e-5
