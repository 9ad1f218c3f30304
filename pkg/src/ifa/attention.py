"""Degree-normalized linear attention and its dense reference paths.

The fast path computes ``D^-1 phi(Q) (phi(K)^T V)`` with
``D = diag(phi(Q) (phi(K)^T 1))`` and never forms the m x n weight matrix.
The dense functions below exist for tests and benchmarks only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, UsageError
from .numeric import GradPair, as_matrix, sigmoid

log = logging.getLogger(__name__)

DEGREE_FLOOR = 1e-12
RELU_EPS = 1e-6
ORACLE_MAX_CELLS = 10**7


class KernelFn(str, Enum):
    SOFTPLUS = "softplus"
    RELU_EPS = "relu_eps"


def kernel_apply(kind, x):
    kind = KernelFn(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is KernelFn.SOFTPLUS:
        # x + log1p(exp(-x)) for x > 0 keeps exp bounded
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return np.maximum(x, 0.0) + RELU_EPS


def kernel_derivative(kind, x):
    kind = KernelFn(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is KernelFn.SOFTPLUS:
        return sigmoid(x)
    return (x > 0).astype(np.float64)


@dataclass(eq=False)
class AttentionParams:
    W_Q: GradPair
    W_K: GradPair
    W_V: GradPair

    def __post_init__(self):
        if self.W_Q.shape[1] != self.W_K.shape[1]:
            raise DimensionError(
                f"query and key projections disagree on inner dim: {self.W_Q.shape} vs {self.W_K.shape}"
            )

    @classmethod
    def init(cls, rng, d_q, d_k, d_v, d, d_out=None, prefix=""):
        def proj(fan_in, fan_out, name):
            return GradPair(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), name=prefix + name)

        return cls(proj(d_q, d, "W_Q"), proj(d_k, d, "W_K"), proj(d_v, d_out or d, "W_V"))

    def pairs(self):
        return [self.W_Q, self.W_K, self.W_V]

    @property
    def out_dim(self):
        return self.W_V.shape[1]


@dataclass(eq=False)
class AttentionCache:
    E_Q: np.ndarray
    E_K: np.ndarray
    E_V: np.ndarray
    Q: np.ndarray  # pre-kernel projections
    K: np.ndarray
    phi_Q: np.ndarray
    phi_K: np.ndarray
    V: np.ndarray
    S: np.ndarray  # phi(K)^T V, d x d_v
    z: np.ndarray  # phi(K)^T 1, length d
    degree: np.ndarray  # floored row sums, length m
    floored: np.ndarray  # rows whose degree hit the floor
    params: AttentionParams
    kernel: KernelFn
    normalize: bool
    consumed: bool = False


@dataclass(eq=False)
class AttentionOutput:
    output: np.ndarray
    cache: AttentionCache


def _project(E_Q, E_K, E_V, p: AttentionParams):
    E_Q = as_matrix(E_Q, "E_Q")
    E_K = as_matrix(E_K, "E_K")
    E_V = as_matrix(E_V, "E_V")
    if E_K.shape[0] != E_V.shape[0]:
        raise DimensionError(f"key rows {E_K.shape[0]} != value rows {E_V.shape[0]}")
    for E, W, label in ((E_Q, p.W_Q, "query"), (E_K, p.W_K, "key"), (E_V, p.W_V, "value")):
        if E.shape[1] != W.shape[0]:
            raise DimensionError(f"{label} input width {E.shape[1]} != projection rows {W.shape[0]}")
    return E_Q, E_K, E_V, E_Q @ p.W_Q.value, E_K @ p.W_K.value, E_V @ p.W_V.value


def linear_attention_forward(E_Q, E_K, E_V, p: AttentionParams, kernel="softplus", normalize=True):
    """Normalized kernel attention in O((m + n) d^2).

    ``normalize=False`` drops the degree normalization and returns the raw
    ``phi(Q)(phi(K)^T V)``; it exists to reproduce the unnormalized
    instability and as a fault injection for the check suite.
    """
    kernel = KernelFn(kernel)
    E_Q, E_K, E_V, Q, K, V = _project(E_Q, E_K, E_V, p)
    if E_Q.shape[0] < 1 or E_K.shape[0] < 1:
        raise DimensionError(f"attention needs at least one query and one key, got m={E_Q.shape[0]}, n={E_K.shape[0]}")
    phi_Q = kernel_apply(kernel, Q)
    phi_K = kernel_apply(kernel, K)
    S = phi_K.T @ V
    z = phi_K.sum(axis=0)
    num = phi_Q @ S
    raw_degree = phi_Q @ z
    floored = raw_degree < DEGREE_FLOOR
    degree = np.where(floored, DEGREE_FLOOR, raw_degree)
    if normalize:
        if floored.any():
            log.warning("degree floor hit on %d of %d query rows", int(floored.sum()), len(degree))
        out = num / degree[:, None]
    else:
        out = num
    cache = AttentionCache(E_Q, E_K, E_V, Q, K, phi_Q, phi_K, V, S, z, degree, floored, p, kernel, normalize)
    return AttentionOutput(out, cache)


def linear_attention_backward(grad_out, cache: AttentionCache):
    """Return ``(dE_Q, dE_K, dE_V)`` and accumulate projection gradients."""
    if not isinstance(cache, AttentionCache):
        raise UsageError("linear_attention_backward needs the cache from linear_attention_forward")
    if cache.consumed:
        raise UsageError("attention cache already consumed")
    G = as_matrix(grad_out, "output grad")
    m, d_v = cache.Q.shape[0], cache.V.shape[1]
    if G.shape != (m, d_v):
        raise DimensionError(f"output grad {G.shape} != output shape {(m, d_v)}")
    cache.consumed = True

    if cache.normalize:
        # out = num / deg  ->  dnum = G / deg, ddeg = -<G, out> / deg
        d_num = G / cache.degree[:, None]
        out = (cache.phi_Q @ cache.S) / cache.degree[:, None]
        d_deg = -np.einsum("ij,ij->i", G, out) / cache.degree
        d_deg[cache.floored] = 0.0
    else:
        d_num = G
        d_deg = np.zeros(m)

    d_phi_Q = d_num @ cache.S.T + np.outer(d_deg, cache.z)
    d_S = cache.phi_Q.T @ d_num
    d_z = cache.phi_Q.T @ d_deg
    d_phi_K = cache.V @ d_S.T + d_z[None, :]
    d_V = cache.phi_K @ d_S

    d_Q = d_phi_Q * kernel_derivative(cache.kernel, cache.Q)
    d_K = d_phi_K * kernel_derivative(cache.kernel, cache.K)

    p = cache.params
    p.W_Q.grad += cache.E_Q.T @ d_Q
    p.W_K.grad += cache.E_K.T @ d_K
    p.W_V.grad += cache.E_V.T @ d_V
    return d_Q @ p.W_Q.value.T, d_K @ p.W_K.value.T, d_V @ p.W_V.value.T


# --------------------------------------------------------------------------
# dense paths


def _softmax_rows(scores, mask=None):
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    top = np.max(scores, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(scores - top)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def softmax_attention_weights(E_Q, E_K, p: AttentionParams):
    E_Q, E_K = as_matrix(E_Q, "E_Q"), as_matrix(E_K, "E_K")
    Q = E_Q @ p.W_Q.value
    K = E_K @ p.W_K.value
    return _softmax_rows(Q @ K.T / np.sqrt(Q.shape[1]))


def dense_softmax_attention(E_Q, E_K, E_V, p: AttentionParams):
    """``softmax(Q K^T / sqrt(d)) V`` with the score matrix materialized."""
    E_Q, E_K, E_V, Q, K, V = _project(E_Q, E_K, E_V, p)
    return _softmax_rows(Q @ K.T / np.sqrt(Q.shape[1])) @ V


def dense_kernel_weights(E_Q, E_K, p: AttentionParams, kernel="softplus", normalize=True):
    E_Q, E_K = as_matrix(E_Q, "E_Q"), as_matrix(E_K, "E_K")
    m, n = E_Q.shape[0], E_K.shape[0]
    if m * n > ORACLE_MAX_CELLS:
        raise UsageError(f"dense oracle refuses m*n = {m * n} > {ORACLE_MAX_CELLS}")
    A = kernel_apply(kernel, E_Q @ p.W_Q.value) @ kernel_apply(kernel, E_K @ p.W_K.value).T
    if normalize:
        row = A.sum(axis=1, keepdims=True)
        A = A / np.maximum(row, DEGREE_FLOOR)
    return A


def dense_kernel_attention_oracle(E_Q, E_K, E_V, p: AttentionParams, kernel="softplus", normalize=True):
    """Kernel attention evaluated in the quadratic order: build the m x n
    weight matrix, row-normalize it, then multiply by V."""
    E_Q, E_K, E_V, _, _, V = _project(E_Q, E_K, E_V, p)
    return dense_kernel_weights(E_Q, E_K, p, kernel, normalize) @ V


# --------------------------------------------------------------------------
# per-query softmax attention over gathered key subsets (DIN / SIM-hard ESU)


@dataclass(eq=False)
class TargetAttentionCache:
    E_Q: np.ndarray
    E_KV: np.ndarray
    index: np.ndarray
    mask: np.ndarray
    Q: np.ndarray
    K_g: np.ndarray  # m x k x d gathered projected keys
    V_g: np.ndarray
    weights: np.ndarray
    params: AttentionParams
    consumed: bool = False


def target_attention_forward(E_Q, E_KV, index, mask, p: AttentionParams):
    """Softmax attention where query row ``i`` sees only ``E_KV[index[i, mask[i]]]``.

    Rows with an empty mask produce a zero output row.
    """
    E_Q = as_matrix(E_Q, "E_Q")
    E_KV = as_matrix(E_KV, "E_KV")
    index = np.asarray(index, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    m = E_Q.shape[0]
    if index.shape != mask.shape or index.ndim != 2 or index.shape[0] != m:
        raise DimensionError(f"index {index.shape} / mask {mask.shape} do not match {m} queries")
    d_out = p.out_dim
    Q = E_Q @ p.W_Q.value
    if E_KV.shape[0] == 0 or index.shape[1] == 0:
        k = index.shape[1]
        empty = np.zeros((m, k, Q.shape[1]))
        cache = TargetAttentionCache(E_Q, E_KV, index, mask, Q, empty, np.zeros((m, k, d_out)), np.zeros((m, k)), p)
        return np.zeros((m, d_out)), cache
    K_all = E_KV @ p.W_K.value
    V_all = E_KV @ p.W_V.value
    safe = np.where(mask, index, 0)
    K_g = K_all[safe]
    V_g = V_all[safe]
    scores = np.einsum("id,ijd->ij", Q, K_g) / np.sqrt(Q.shape[1])
    w = _softmax_rows(scores, mask)
    out = np.einsum("ij,ijd->id", w, V_g)
    return out, TargetAttentionCache(E_Q, E_KV, safe, mask, Q, K_g, V_g, w, p)


def target_attention_backward(grad_out, cache: TargetAttentionCache):
    """Return ``(dE_Q, dE_KV)`` and accumulate projection gradients."""
    if not isinstance(cache, TargetAttentionCache):
        raise UsageError("target_attention_backward needs the cache from target_attention_forward")
    if cache.consumed:
        raise UsageError("target attention cache already consumed")
    cache.consumed = True
    G = as_matrix(grad_out, "output grad")
    p = cache.params
    dE_Q = np.zeros_like(cache.E_Q)
    dE_KV = np.zeros_like(cache.E_KV)
    if cache.E_KV.shape[0] == 0 or cache.index.shape[1] == 0:
        return dE_Q, dE_KV
    w = cache.weights
    d_V_g = w[:, :, None] * G[:, None, :]
    d_w = np.einsum("id,ijd->ij", G, cache.V_g)
    d_scores = w * (d_w - np.sum(d_w * w, axis=1, keepdims=True))
    d_scores /= np.sqrt(cache.Q.shape[1])
    d_Q = np.einsum("ij,ijd->id", d_scores, cache.K_g)
    d_K_g = d_scores[:, :, None] * cache.Q[:, None, :]

    n = cache.E_KV.shape[0]
    d_K_all = np.zeros((n, d_K_g.shape[2]))
    d_V_all = np.zeros((n, d_V_g.shape[2]))
    flat = cache.index.ravel()
    np.add.at(d_K_all, flat, d_K_g.reshape(-1, d_K_g.shape[2]))
    np.add.at(d_V_all, flat, d_V_g.reshape(-1, d_V_g.shape[2]))

    p.W_Q.grad += cache.E_Q.T @ d_Q
    p.W_K.grad += cache.E_KV.T @ d_K_all
    p.W_V.grad += cache.E_KV.T @ d_V_all
    dE_Q = d_Q @ p.W_Q.value.T
    dE_KV = d_K_all @ p.W_K.value.T + d_V_all @ p.W_V.value.T
    return dE_Q, dE_KV
