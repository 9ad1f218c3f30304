"""Candidate-scope AUC.

Every candidate in a request is a sample: actioned items are positives and
all other candidates (impressed or not) are negatives.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float | None:
    """Probability that a random positive outscores a random negative.

    Ties count one half. Returns ``None`` when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


class EvalAccumulator:
    """Collects per-candidate predictions and labels across a request stream."""

    def __init__(self):
        self._cols = {"imp": ([], []), "cli": ([], []), "lv": ([], [])}

    def add(self, scores, req):
        self._cols["imp"][0].append(np.asarray(scores.y_imp))
        self._cols["imp"][1].append(req.label_imp)
        self._cols["cli"][0].append(np.asarray(scores.pitctr))
        self._cols["cli"][1].append(req.label_cli)
        if scores.y_lv is not None and req.label_lv is not None:
            self._cols["lv"][0].append(np.asarray(scores.y_imp * scores.y_lv))
            self._cols["lv"][1].append(req.label_lv)

    def __len__(self):
        return sum(len(s) for s in self._cols["imp"][0])

    def result(self) -> dict:
        """AUC per action; absent actions map to ``None``."""
        out = {}
        for action, (s, l) in self._cols.items():
            if not s:
                if action != "lv":
                    out[action] = None
                continue
            out[action] = auc(np.concatenate(s), np.concatenate(l))
        return out


def evaluate(model, requests: Iterable) -> dict:
    acc = EvalAccumulator()
    for req in requests:
        acc.add(model.score(req), req)
    return acc.result()
