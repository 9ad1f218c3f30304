"""Dense float64 arithmetic, MLP towers and optimizers.

Every trainable tensor is a :class:`GradPair`; forward functions return a
cache object that the matching backward consumes exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, TrainingError, UsageError

DTYPE = np.float64


@dataclass(eq=False)
class GradPair:
    """A parameter value and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.value.ndim != 2:
            raise DimensionError(f"{self.name or 'parameter'}: expected 2-D, got shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def as_matrix(x, name="matrix") -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# MLP tower


@dataclass(eq=False)
class MLPCache:
    inputs: list  # input of every affine layer, hidden ones post-ReLU
    pre: list  # pre-activations of hidden layers
    output: np.ndarray
    layers: Sequence
    final: tuple
    consumed: bool = False


def mlp_forward(x, layers, final):
    """Run ``ReLU(F W + b)`` for each hidden layer then ``sigmoid(F w + b)``.

    ``layers`` is a list of ``(weight, bias)`` GradPairs, ``final`` a single
    pair projecting to one column. Returns ``(cache, y)`` with ``y`` of shape
    ``(rows, 1)``.
    """
    h = as_matrix(x, "mlp input")
    inputs, pre = [], []
    for i, (w, b) in enumerate(layers):
        if h.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
            raise DimensionError(f"hidden layer {i}: input {h.shape}, weight {w.shape}, bias {b.shape}")
        inputs.append(h)
        z = h @ w.value + b.value
        pre.append(z)
        h = np.maximum(z, 0.0)
    w, b = final
    if h.shape[1] != w.shape[0] or w.shape[1] != 1 or b.shape != (1, 1):
        raise DimensionError(f"output layer: input {h.shape}, weight {w.shape}, bias {b.shape}")
    inputs.append(h)
    y = sigmoid(h @ w.value + b.value)
    return MLPCache(inputs, pre, y, list(layers), final), y


def mlp_backward(dy, cache: MLPCache) -> np.ndarray:
    """Backpropagate ``dL/dy`` (gradient w.r.t. the sigmoid output).

    Parameter gradients are accumulated; the input gradient is returned.
    """
    if cache is None or not isinstance(cache, MLPCache):
        raise UsageError("mlp_backward needs the cache returned by mlp_forward")
    if cache.consumed:
        raise UsageError("mlp cache already consumed by a previous backward")
    dy = as_matrix(dy, "output grad")
    if dy.shape != cache.output.shape:
        raise DimensionError(f"output grad {dy.shape} does not match output {cache.output.shape}")
    cache.consumed = True

    y = cache.output
    dz = dy * y * (1.0 - y)
    w, b = cache.final
    h = cache.inputs[-1]
    w.grad += h.T @ dz
    b.grad += dz.sum(axis=0, keepdims=True)
    dh = dz @ w.value.T
    for (w, b), x, z in zip(reversed(cache.layers), reversed(cache.inputs[:-1]), reversed(cache.pre)):
        dz = dh * (z > 0)
        w.grad += x.T @ dz
        b.grad += dz.sum(axis=0, keepdims=True)
        dh = dz @ w.value.T
    return dh


# --------------------------------------------------------------------------
# optimizers


def _check_finite(params: Iterable[GradPair]):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")


def global_grad_norm(params: Iterable[GradPair]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params: Sequence[GradPair], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def sgd_step(params: Sequence[GradPair], lr: float):
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _check_finite(params)
    for p in params:
        p.value -= lr * p.grad
        p.zero_grad()


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self, params: Sequence[GradPair]):
        _check_finite(params)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in params:
            m = self._m.get(p.name)
            if m is None:
                m = self._m[p.name] = np.zeros_like(p.value)
                self._v[p.name] = np.zeros_like(p.value)
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1, state=None):
    """Functional Adam update; ``state`` is a reusable :class:`Adam` holding moments."""
    opt = state if state is not None else Adam()
    opt.lr, opt.beta1, opt.beta2, opt.eps = lr, beta1, beta2, eps
    opt.t = t - 1
    opt.step(params)
    return opt


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params):
        sgd_step(params, self.lr)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
