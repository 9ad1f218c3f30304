"""Property suites behind ``ifa check``.

Each suite returns a :class:`SuiteResult` with the worst observed error
against its tolerance. ``fault="skip_norm"`` disables the degree
normalization in the fast path so the equivalence suite must fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    dense_kernel_attention_oracle,
    dense_kernel_weights,
    linear_attention_backward,
    linear_attention_forward,
    target_attention_backward,
    target_attention_forward,
)
from .data import GenConfig, generate
from .evaluate import auc
from .model import IFAModel, ModelConfig
from .numeric import GradPair, mlp_backward, mlp_forward
from .training import esmm_loss

FAULTS = ("skip_norm",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""


def max_rel_err(a, b) -> float:
    """Elementwise relative error, denominators floored at 1e-6 of the row scale
    so entries that happen to cancel to ~0 do not dominate."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.max(np.abs(b), axis=-1, keepdims=True)
    denom = np.maximum(np.abs(b), np.maximum(1e-6 * scale, 1e-300))
    return float(np.max(np.abs(a - b) / denom))


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def grad_rel_err(analytic, numeric) -> float:
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def auc_pairwise(scores, labels) -> float | None:
    """O(P * N) enumeration: wins count 1, ties 1/2."""
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels != 1]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = 0.0
    for s in pos:
        wins += np.sum(s > neg) + 0.5 * np.sum(s == neg)
    return float(wins / (len(pos) * len(neg)))


def _random_attention(rng, max_mn=64, max_d=16):
    m, n = rng.integers(1, max_mn + 1, size=2)
    d_in, d, d_v = rng.integers(1, max_d + 1, size=3)
    p = AttentionParams.init(rng, d_in, d_in, d_in, d, d_v)
    return p, rng.normal(size=(m, d_in)), rng.normal(size=(n, d_in)), rng.normal(size=(n, d_in))


def equivalence_suite(instances=1000, seed=0, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        kernel = ("softplus", "relu_eps")[i % 2]
        p, EQ, EK, EV = _random_attention(rng)
        fast = linear_attention_forward(EQ, EK, EV, p, kernel, normalize=fault != "skip_norm").output
        slow = dense_kernel_attention_oracle(EQ, EK, EV, p, kernel)
        worst = max(worst, max_rel_err(fast, slow))
    return SuiteResult("equivalence", worst <= 1e-10, worst, 1e-10, f"{instances} instances, m,n<=64, d<=16")


def normalization_suite(instances=100, seed=1, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        kernel = ("softplus", "relu_eps")[i % 2]
        p, EQ, EK, _ = _random_attention(rng)
        p = AttentionParams(p.W_Q, p.W_K, GradPair(np.ones((1, p.out_dim))))
        n = EK.shape[0]
        out = linear_attention_forward(EQ, EK, np.ones((n, 1)), p, kernel, normalize=fault != "skip_norm").output
        worst = max(worst, float(np.max(np.abs(out - 1.0))))
        W = dense_kernel_weights(EQ, EK, p, kernel)
        worst = max(worst, float(np.max(np.abs(W.sum(axis=1) - 1.0))))
        if np.any(W < 0):
            worst = np.inf
    return SuiteResult("normalization", worst <= 1e-12, worst, 1e-12, "V = 1 gives 1; oracle weights >= 0, rows sum to 1")


def permutation_suite(instances=100, seed=2, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        kernel = ("softplus", "relu_eps")[i % 2]
        p, EQ, EK, EV = _random_attention(rng, max_mn=32)
        norm = fault != "skip_norm"
        base = linear_attention_forward(EQ, EK, EV, p, kernel, norm).output
        kv = rng.permutation(EK.shape[0])
        qp = rng.permutation(EQ.shape[0])
        a = linear_attention_forward(EQ, EK[kv], EV[kv], p, kernel, norm).output
        b = linear_attention_forward(EQ[qp], EK, EV, p, kernel, norm).output
        worst = max(worst, max_rel_err(a, base), max_rel_err(b, base[qp]))
    return SuiteResult("permutation", worst <= 1e-10, worst, 1e-10, "key/value invariance, query equivariance")


def gradient_suite(seed=3, fault=None) -> SuiteResult:
    """Finite differences (h = 1e-5) for every backward path on toy instances."""
    rng = np.random.default_rng(seed)
    errors = {}
    norm = fault != "skip_norm"

    # MLP tower
    layers = [(GradPair(rng.normal(size=(3, 4))), GradPair(rng.normal(size=(1, 4))))]
    final = (GradPair(rng.normal(size=(4, 1))), GradPair(rng.normal(size=(1, 1))))
    x = rng.normal(size=(5, 3))
    cot = rng.normal(size=(5, 1))
    f = lambda: float(np.sum(cot * mlp_forward(x, layers, final)[1]))  # noqa: E731
    cache, _ = mlp_forward(x, layers, final)
    dx = mlp_backward(cot, cache)
    errs = [grad_rel_err(dx, central_diff(f, x))]
    errs += [grad_rel_err(gp.grad, central_diff(f, gp.value)) for pair in layers + [final] for gp in pair]
    errors["mlp"] = max(errs)

    # linear attention, both kernels
    errs = []
    for kernel in ("softplus", "relu_eps"):
        p = AttentionParams.init(rng, 3, 3, 3, 2)
        EQ, EK, EV = rng.normal(size=(2, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        cot = rng.normal(size=(2, 2))
        f = lambda: float(np.sum(cot * linear_attention_forward(EQ, EK, EV, p, kernel, norm).output))  # noqa: E731
        grads = linear_attention_backward(cot, linear_attention_forward(EQ, EK, EV, p, kernel, norm).cache)
        errs += [grad_rel_err(g, central_diff(f, x)) for g, x in zip(grads, (EQ, EK, EV))]
        errs += [grad_rel_err(gp.grad, central_diff(f, gp.value)) for gp in p.pairs()]
    errors["linear_attention"] = max(errs)

    # gathered softmax attention
    p = AttentionParams.init(rng, 3, 3, 3, 2)
    EQ, EKV = rng.normal(size=(3, 3)), rng.normal(size=(4, 3))
    index = np.array([[0, 2], [3, 1], [0, 0]])
    mask = np.array([[True, True], [True, False], [False, False]])
    cot = rng.normal(size=(3, 2))
    f = lambda: float(np.sum(cot * target_attention_forward(EQ, EKV, index, mask, p)[0]))  # noqa: E731
    dq, dkv = target_attention_backward(cot, target_attention_forward(EQ, EKV, index, mask, p)[1])
    errs = [grad_rel_err(dq, central_diff(f, EQ)), grad_rel_err(dkv, central_diff(f, EKV))]
    errs += [grad_rel_err(gp.grad, central_diff(f, gp.value)) for gp in p.pairs()]
    errors["target_attention"] = max(errs)

    # ESMM loss through the product of both towers
    class _S:
        pass

    s = _S()
    s.y_imp, s.y_cli, s.y_lv = rng.uniform(0.1, 0.9, 6), rng.uniform(0.1, 0.9, 6), None
    l_imp = np.array([1, 1, 0, 1, 0, 0])
    l_cli = np.array([1, 0, 0, 1, 0, 0])
    _, g = esmm_loss(s, l_imp, l_cli, lam=0.7)
    f = lambda: esmm_loss(s, l_imp, l_cli, lam=0.7)[0].total  # noqa: E731
    errors["esmm_loss"] = max(grad_rel_err(g["imp"], central_diff(f, s.y_imp)), grad_rel_err(g["cli"], central_diff(f, s.y_cli)))

    # full model incl. embeddings, for IFA and every baseline
    gen = GenConfig(num_users=10, num_items=40, num_categories=3, num_topics=3, m=5, n=9,
                    impression_budget=3, num_requests=1, seed=seed)
    req = next(generate(gen))
    errs = []
    for extra in ({}, {"baseline": "sim_hard", "k": 3}, {"baseline": "din", "k": 4}, {"baseline": "avgpool"}):
        cfg = ModelConfig.for_generator(gen, attn_dim=3, hidden=(4,), item_dims=(2, 2, 2, 2), user_dims=(2,),
                                        cross_dims=(2,), normalize=norm, seed=seed, **extra)
        model = IFAModel(cfg)

        def loss():
            return esmm_loss(model.forward(req)[0], req.label_imp, req.label_cli)[0].total

        scores, cache = model.forward(req)
        model.backward(esmm_loss(scores, req.label_imp, req.label_cli)[1], cache)
        pick = np.random.default_rng(seed)
        for gp in model.params:
            # error relative to the tensor's gradient scale: entries near 1e-8
            # are dominated by finite-difference roundoff otherwise
            scale = max(float(np.max(np.abs(gp.grad))), 1e-8)
            for _ in range(3):
                idx = tuple(int(pick.integers(0, s)) for s in gp.shape)
                orig = gp.value[idx]
                gp.value[idx] = orig + 1e-5
                up = loss()
                gp.value[idx] = orig - 1e-5
                down = loss()
                gp.value[idx] = orig
                num = (up - down) / 2e-5
                errs.append(abs(num - gp.grad[idx]) / max(abs(num), abs(gp.grad[idx]), scale))
    errors["model"] = max(errs)

    worst = max(errors.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errors.items())
    return SuiteResult("gradients", worst <= 1e-5, worst, 1e-5, detail)


def auc_suite(instances=500, seed=4, fault=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(instances):
        size = int(rng.integers(2, 40))
        scores = rng.integers(0, 6, size) / 5.0  # coarse grid forces ties
        labels = rng.integers(0, 2, size)
        if auc(scores, labels) != auc_pairwise(scores, labels):
            mismatches += 1
    return SuiteResult("auc", mismatches == 0, float(mismatches), 0.0, "rank AUC vs pairwise enumeration, exact")


def fsm_activation_scale(model: IFAModel, req, normalize=True) -> float:
    """Mean |F_cs| of the candidate-to-sequence attention for one request."""
    from .model import attention_params, embed_request

    emb = embed_request(req, model.params, model.cfg)
    out = linear_attention_forward(emb.F_can, emb.F_seq, emb.F_seq, attention_params(model.params, "fsm"),
                                   model.cfg.kernel, normalize).output
    return float(np.mean(np.abs(out)))


def stability_ratios(seed=5, n_small=64, n_large=4096):
    """Activation growth from n_small to n_large with and without degree normalization."""
    cfg = ModelConfig(seed=seed)
    model = IFAModel(cfg)
    ratios = {}
    reqs = {}
    for n in (n_small, n_large):
        gen = GenConfig(n=n, num_requests=1, seed=seed)
        reqs[n] = next(generate(gen))
    for normalize in (True, False):
        small = fsm_activation_scale(model, reqs[n_small], normalize)
        large = fsm_activation_scale(model, reqs[n_large], normalize)
        ratios[normalize] = large / small
    return ratios


def stability_suite(seed=5, fault=None) -> SuiteResult:
    r = stability_ratios(seed)
    normalized = r[fault != "skip_norm"]
    ok = r[False] > 10.0 and normalized <= 2.0 and normalized >= 0.5
    return SuiteResult("stability", ok, normalized, 2.0,
                       f"unnormalized growth {r[False]:.1f}x (>10 required), normalized {normalized:.2f}x (<=2)")


SUITES = {
    "equivalence": equivalence_suite,
    "normalization": normalization_suite,
    "permutation": permutation_suite,
    "gradients": gradient_suite,
    "auc": auc_suite,
    "stability": stability_suite,
}


def run_all(fault=None) -> list[SuiteResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault mode {fault!r}; choose from {FAULTS}")
    return [suite(fault=fault) for suite in SUITES.values()]
