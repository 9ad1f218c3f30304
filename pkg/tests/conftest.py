import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
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


def rel_err(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_GEN = dict(num_users=10, num_items=40, num_categories=3, num_topics=3, m=5, n=9,
                impression_budget=3, num_requests=4, seed=7)
TINY_MODEL = dict(attn_dim=3, hidden=(4,), item_dims=(2, 2, 2, 2), user_dims=(2,), cross_dims=(2,))


def tiny(num_requests=1, gen=None, **model_kw):
    """A small generator config, its first requests and a matching model config."""
    from ifa.data import GenConfig, generate
    from ifa.model import ModelConfig

    g = GenConfig(**{**TINY_GEN, **(gen or {}), "num_requests": num_requests})
    reqs = list(generate(g))
    cfg = ModelConfig.for_generator(g, **{**TINY_MODEL, **model_kw})
    return g, reqs, cfg


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
