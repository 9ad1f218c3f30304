"""Ablation and baseline comparisons on a train / holdout split."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass

from .evaluate import evaluate
from .model import IFAModel, ModelConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

ABLATIONS = {
    "IFA": {},
    "IFA-RAM": {"use_ram": False},
    "IFA-FSM-RAM": {"use_fsm": False, "use_ram": False},
}

BASELINES = {
    "IFA": {},
    "SIM-hard": {"baseline": "sim_hard"},
    "DIN": {"baseline": "din"},
    "AvgPooling": {"baseline": "avgpool"},
}


@dataclass
class Row:
    name: str
    auc: dict
    train_seconds: float


def split_holdout(requests, holdout=0.2):
    """Last ``holdout`` fraction of the stream is held out (time order is kept)."""
    requests = list(requests)
    if not 0.0 < holdout < 1.0:
        raise ValueError("holdout must be in (0, 1)")
    n_test = max(1, int(round(len(requests) * holdout)))
    if n_test >= len(requests):
        raise ValueError(f"need at least 2 requests to split, got {len(requests)}")
    return requests[:-n_test], requests[-n_test:]


def run_variants(train_reqs, test_reqs, base: ModelConfig, train_cfg: TrainConfig, variants: dict) -> list[Row]:
    """Train one fresh model per variant with a shared seed and score the holdout."""
    rows = []
    for name, overrides in variants.items():
        cfg = dataclasses.replace(base, **overrides)
        cfg.validate()
        model = IFAModel(cfg)
        start = time.perf_counter()
        train(train_reqs, model, train_cfg)
        elapsed = time.perf_counter() - start
        result = evaluate(model, test_reqs)
        log.info("%s: %s (%.0fs)", name, result, elapsed)
        rows.append(Row(name, result, elapsed))
    return rows


def format_table(rows: list[Row]) -> str:
    actions = []
    for r in rows:
        actions += [a for a in r.auc if a not in actions]
    header = f"{'model':<14}" + "".join(f"{'auc_' + a:>10}" for a in actions)
    lines = [header]
    for r in rows:
        cells = []
        for a in actions:
            v = r.auc.get(a)
            cells.append(f"{'-':>10}" if v is None else f"{v:>10.4f}")
        lines.append(f"{r.name:<14}" + "".join(cells))
    return "\n".join(lines)
