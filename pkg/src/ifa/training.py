"""ESMM objective, the evaluate-then-train loop, checkpoints and logs."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DataError, TrainingError
from .evaluate import EvalAccumulator
from .numeric import clip_grad_norm, make_optimizer

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MAGIC = b"IFA1"


@dataclass
class LossReport:
    l_imp: float
    l_cli: float
    total: float
    count_imp_pos: int
    count_cli_pos: int
    l_lv: float | None = None


def _bce(prob, labels):
    """Mean negative log-likelihood and its derivative w.r.t. ``prob``.

    Probabilities are clamped before the log; the derivative is zero where
    the clamp is active.
    """
    p = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    m = prob.shape[0]
    loss = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1.0 - p))
    grad = -(labels / p - (1 - labels) / (1.0 - p)) / m
    grad = np.where((prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP), grad, 0.0)
    return float(loss), grad


def esmm_loss(scores, label_imp, label_cli, lam: float = 1.0, label_lv=None, lam_lv: float = 1.0):
    """Impression loss on ``y_imp`` plus click loss on ``y_imp * y_cli``.

    Both are negated mean log-likelihoods over the candidate set. Returns
    ``(LossReport, {tower: dL/dy})``; the click term feeds both towers.
    """
    l_imp_lab = np.asarray(label_imp, dtype=np.float64)
    l_cli_lab = np.asarray(label_cli, dtype=np.float64)
    if np.any(l_cli_lab > l_imp_lab):
        raise DataError("click label without impression label")
    y_imp = np.asarray(scores.y_imp, dtype=np.float64)
    y_cli = np.asarray(scores.y_cli, dtype=np.float64)

    L_imp, g_imp = _bce(y_imp, l_imp_lab)
    L_cli, g_p = _bce(y_imp * y_cli, l_cli_lab)
    d_imp = g_imp + lam * g_p * y_cli
    d_cli = lam * g_p * y_imp
    total = L_imp + lam * L_cli
    grads = {"imp": d_imp, "cli": d_cli}
    L_lv = None
    if label_lv is not None and scores.y_lv is not None:
        l_lv_lab = np.asarray(label_lv, dtype=np.float64)
        y_lv = np.asarray(scores.y_lv, dtype=np.float64)
        L_lv, g_q = _bce(y_imp * y_lv, l_lv_lab)
        grads["imp"] = grads["imp"] + lam_lv * g_q * y_lv
        grads["lv"] = lam_lv * g_q * y_imp
        total += lam_lv * L_lv
    report = LossReport(L_imp, L_cli, total, int(l_imp_lab.sum()), int(l_cli_lab.sum()), L_lv)
    return report, grads


@dataclass
class TrainConfig:
    lr: float = 3e-3
    optimizer: str = "adam"
    lam: float = 1.0
    lam_lv: float = 1.0
    batch_size: int = 1
    epochs: int = 1
    clip: float = 5.0
    seed: int = 0
    eval_every: int = 100

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not self.clip > 0:
            raise ConfigError("clip must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, epochs and eval_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    progressive: dict = field(default_factory=dict)
    step: int = 0

    def losses(self, key="total"):
        return [r[key] for r in self.records if key in r]


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        if v is None:
            continue
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            out[k] = float(v)
    return out


def _batches(items: Iterable, size: int) -> Iterator[list]:
    it = iter(items)
    while batch := list(islice(it, size)):
        yield batch


def train(requests: Iterable, model, cfg: TrainConfig, log_path=None, on_step=None) -> TrainLog:
    """Stream requests in batches: score each batch first (progressive
    evaluation), then backpropagate the ESMM loss and take one step."""
    cfg.validate()
    if cfg.epochs > 1:
        requests = list(requests)
    params = model.params.pairs()
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    tlog = TrainLog()
    acc = EvalAccumulator()
    fh = open(log_path, "a") if log_path is not None else None
    model.params.zero_grad()
    try:
        for epoch in range(cfg.epochs):
            for batch in _batches(requests, cfg.batch_size):
                sums = np.zeros(3)
                pos = np.zeros(2, dtype=np.int64)
                lv_sum, has_lv = 0.0, False
                for req in batch:
                    scores, cache = model.forward(req)
                    acc.add(scores, req)
                    report, grads = esmm_loss(scores, req.label_imp, req.label_cli, cfg.lam, req.label_lv, cfg.lam_lv)
                    if not np.isfinite(report.total):
                        raise TrainingError(
                            f"non-finite loss at step {tlog.step}; last good checkpoint is from step {tlog.step - 1}"
                        )
                    scale = 1.0 / len(batch)
                    model.backward({k: v * scale for k, v in grads.items()}, cache)
                    sums += (report.l_imp, report.l_cli, report.total)
                    pos += (report.count_imp_pos, report.count_cli_pos)
                    if report.l_lv is not None:
                        lv_sum += report.l_lv
                        has_lv = True
                grad_norm = clip_grad_norm(params, cfg.clip)
                opt.step(params)
                tlog.step += 1
                mean = sums / len(batch)
                rec = {
                    "step": tlog.step,
                    "epoch": epoch,
                    "l_imp": float(mean[0]),
                    "l_cli": float(mean[1]),
                    "total": float(mean[2]),
                    "grad_norm": grad_norm,
                    "imp_pos": int(pos[0]),
                    "cli_pos": int(pos[1]),
                }
                if has_lv:
                    rec["l_lv"] = lv_sum / len(batch)
                if tlog.step % cfg.eval_every == 0:
                    for action, value in acc.result().items():
                        rec[f"auc_{action}"] = value
                tlog.records.append(rec)
                if fh is not None:
                    fh.write(format_record(rec) + "\n")
                if on_step is not None:
                    on_step(rec)
    finally:
        if fh is not None:
            fh.close()
    tlog.progressive = acc.result()
    return tlog


# --------------------------------------------------------------------------
# checkpoints: magic, 32-byte config digest, u64 step, then tensors until EOF


def save_checkpoint(path, params, digest: bytes, step: int):
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(digest)
        fh.write(struct.pack("<Q", step))
        for gp in params:
            name = gp.name.encode()
            rows, cols = gp.shape
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(gp.value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(digest, step, {name: array})``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    try:
        digest = data[4:36]
        (step,) = struct.unpack_from("<Q", data, 36)
        pos = 44
        tensors = {}
        while pos < len(data):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode()
            pos += name_len
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(data):
                raise DataError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += nbytes
    except struct.error:
        raise DataError(f"{path}: truncated checkpoint") from None
    return digest, step, tensors
