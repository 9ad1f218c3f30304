"""The IFA ranking network and its sequence-modeling baselines.

Per request the network embeds the candidate set, cross features, user
features and behaviour sequence, then builds

    F = [F_cs, F_cc, F_u, F_cro]

where ``F_cs`` is candidate-to-sequence attention (FSM), ``F_cc`` is
attention within the candidate set (RAM). Two sigmoid towers read ``F`` and
predict p(imp | can) and p(cli | imp); their product orders candidates.

Baselines replace ``F_cs``: ``avgpool`` uses the sequence mean, ``din`` runs
softmax target attention over the ``k`` most recent items and ``sim_hard``
over at most ``k`` same-category items. RAM is off for every baseline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .attention import (
    AttentionParams,
    KernelFn,
    linear_attention_backward,
    linear_attention_forward,
    target_attention_backward,
    target_attention_forward,
)
from .data import Request
from .errors import ConfigError, DataError, UsageError
from .numeric import GradPair, mlp_backward, mlp_forward

BASELINES = ("none", "avgpool", "din", "sim_hard")


@dataclass
class ModelConfig:
    user_vocab: tuple = (10001,)
    user_dims: tuple = (8,)
    item_vocab: tuple = (4097, 33, 33, 5)
    item_dims: tuple = (4, 8, 8, 4)
    cross_vocab: tuple = (3,)
    cross_dims: tuple = (4,)
    attn_dim: int = 32
    hidden: tuple = (64, 32)
    use_fsm: bool = True
    use_ram: bool = True
    kernel: str = "relu_eps"
    baseline: str = "none"
    k: int = 16
    ram_softmax: bool = False
    long_view: bool = False
    normalize: bool = True
    emb_init: float = 0.3
    category_field: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("user_vocab", "user_dims", "item_vocab", "item_dims", "cross_vocab", "cross_dims", "hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @classmethod
    def for_generator(cls, gen, **overrides) -> "ModelConfig":
        """Vocabulary sizes taken from a :class:`~ifa.data.GenConfig`."""
        kw = dict(user_vocab=gen.user_vocab, item_vocab=gen.item_vocab, cross_vocab=gen.cross_vocab)
        kw.update(overrides)
        return cls(**kw)

    def validate(self):
        for fam in ("user", "item", "cross"):
            vocab, dims = getattr(self, f"{fam}_vocab"), getattr(self, f"{fam}_dims")
            if len(vocab) != len(dims) or not vocab:
                raise ConfigError(f"{fam}_vocab and {fam}_dims must be non-empty and the same length")
            if min(vocab) < 1 or min(dims) < 1:
                raise ConfigError(f"{fam} vocab sizes and dims must be >= 1")
        if self.attn_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("attention and hidden dims must be >= 1")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.baseline in ("din", "sim_hard") and self.k < 1:
            raise ConfigError("k must be >= 1 for din and sim_hard")
        if not 0 <= self.category_field < len(self.item_vocab):
            raise ConfigError("category_field must index an item field")
        KernelFn(self.kernel)
        return self

    @property
    def d_u(self):
        return sum(self.user_dims)

    @property
    def d_i(self):
        return sum(self.item_dims)

    @property
    def d_ui(self):
        return sum(self.cross_dims)

    @property
    def fsm_active(self):
        return self.baseline != "none" or self.use_fsm

    @property
    def ram_active(self):
        return self.baseline == "none" and self.use_ram

    @property
    def towers(self):
        return ("imp", "cli", "lv") if self.long_view else ("imp", "cli")

    def block_widths(self):
        """Ordered (name, width) of the blocks concatenated into F."""
        blocks = []
        if self.fsm_active:
            blocks.append(("cs", self.d_i if self.baseline == "avgpool" else self.attn_dim))
        if self.ram_active:
            blocks.append(("cc", self.attn_dim))
        blocks += [("u", self.d_u), ("cro", self.d_ui)]
        return blocks

    def digest(self) -> bytes:
        """SHA-256 of the canonical config; stored in checkpoints."""
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).digest()


class ModelParams:
    """Ordered registry of every trainable tensor."""

    def __init__(self):
        self._pairs: dict[str, GradPair] = {}

    def add(self, name, value) -> GradPair:
        if name in self._pairs:
            raise ValueError(f"duplicate parameter {name!r}")
        gp = GradPair(value, name=name)
        self._pairs[name] = gp
        return gp

    def __getitem__(self, name) -> GradPair:
        return self._pairs[name]

    def __contains__(self, name):
        return name in self._pairs

    def __iter__(self):
        return iter(self._pairs.values())

    def __len__(self):
        return len(self._pairs)

    def names(self):
        return list(self._pairs)

    def pairs(self):
        return list(self._pairs.values())

    def zero_grad(self):
        for p in self._pairs.values():
            p.zero_grad()

    def state(self) -> dict:
        return {k: v.value.copy() for k, v in self._pairs.items()}

    def load_state(self, state: dict):
        missing = set(self._pairs) ^ set(state)
        if missing:
            raise ConfigError(f"parameter sets differ: {sorted(missing)}")
        for name, value in state.items():
            gp = self._pairs[name]
            if value.shape != gp.shape:
                raise ConfigError(f"{name}: shape {value.shape} != expected {gp.shape}")
            gp.value[...] = value
            gp.zero_grad()


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    P = ModelParams()
    for fam in ("user", "item", "cross"):
        for j, (vocab, dim) in enumerate(zip(getattr(cfg, f"{fam}_vocab"), getattr(cfg, f"{fam}_dims"))):
            P.add(f"emb.{fam}.{j}", rng.uniform(-cfg.emb_init, cfg.emb_init, size=(vocab, dim)))
    d_i, d = cfg.d_i, cfg.attn_dim

    def attention(prefix):
        for name, fan_in in (("W_Q", d_i), ("W_K", d_i), ("W_V", d_i)):
            P.add(f"{prefix}.{name}", rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, d)))

    if cfg.fsm_active and cfg.baseline != "avgpool":
        attention("fsm")
    if cfg.ram_active:
        attention("ram")
    width = sum(w for _, w in cfg.block_widths())
    for tower in cfg.towers:
        fan_in = width
        for layer, h in enumerate(cfg.hidden):
            P.add(f"tower.{tower}.W{layer}", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, h)))
            P.add(f"tower.{tower}.b{layer}", np.zeros((1, h)))
            fan_in = h
        P.add(f"tower.{tower}.w", rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, 1)))
        P.add(f"tower.{tower}.b", np.zeros((1, 1)))
    return P


def attention_params(params: ModelParams, prefix: str) -> AttentionParams:
    return AttentionParams(params[f"{prefix}.W_Q"], params[f"{prefix}.W_K"], params[f"{prefix}.W_V"])


def tower_layers(params: ModelParams, cfg: ModelConfig, tower: str):
    layers = [(params[f"tower.{tower}.W{i}"], params[f"tower.{tower}.b{i}"]) for i in range(len(cfg.hidden))]
    return layers, (params[f"tower.{tower}.w"], params[f"tower.{tower}.b"])


# --------------------------------------------------------------------------
# embeddings


@dataclass(eq=False)
class Embedded:
    F_can: np.ndarray
    F_cro: np.ndarray
    F_seq: np.ndarray
    F_u: np.ndarray
    lookups: list = field(default_factory=list)  # (table, ids, slot, column slice)


def _lookup(params, fam, ids, vocab, dims, slot, label):
    """Concatenate per-field embeddings for an (rows x fields) id matrix."""
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != len(vocab):
        raise DataError(f"{label}: expected {len(vocab)} feature ids per row, got shape {ids.shape}")
    parts, lookups, col = [], [], 0
    for j, (v, d) in enumerate(zip(vocab, dims)):
        col_ids = ids[:, j]
        if col_ids.size and (col_ids.min() < 0 or col_ids.max() >= v):
            bad = col_ids[(col_ids < 0) | (col_ids >= v)][0]
            raise DataError(f"{label} field {j}: id {bad} outside vocabulary [0, {v})")
        table = params[f"emb.{fam}.{j}"]
        parts.append(table.value[col_ids])
        lookups.append((table, col_ids, slot, slice(col, col + d)))
        col += d
    out = np.concatenate(parts, axis=1) if parts else np.zeros((ids.shape[0], 0))
    return out, lookups


def embed_request(req: Request, params: ModelParams, cfg: ModelConfig) -> Embedded:
    """Look up ``(F_can, F_cro, F_seq, F_u)``; ``F_u`` is the user vector repeated m times."""
    m = req.m
    F_can, l_can = _lookup(params, "item", req.cand_items, cfg.item_vocab, cfg.item_dims, "can", "candidate item_feats")
    F_cro, l_cro = _lookup(params, "cross", req.cand_cross, cfg.cross_vocab, cfg.cross_dims, "cro", "cross_feats")
    seq_ids = req.seq_items if req.n else np.zeros((0, len(cfg.item_vocab)), dtype=np.int64)
    F_seq, l_seq = _lookup(params, "item", seq_ids, cfg.item_vocab, cfg.item_dims, "seq", "sequence item_feats")
    f_u, l_u = _lookup(params, "user", req.user_feats[None, :], cfg.user_vocab, cfg.user_dims, "u", "user_feats")
    F_u = np.repeat(f_u, m, axis=0)
    return Embedded(F_can, F_cro, F_seq, F_u, l_can + l_cro + l_seq + l_u)


def embed_backward(emb: Embedded, grads: dict):
    """Scatter block gradients (keyed by slot) into the embedding tables."""
    for table, ids, slot, cols in emb.lookups:
        g = grads.get(slot)
        if g is None or ids.size == 0:
            continue
        if slot == "u":
            # F_u is one vector broadcast to m rows
            table.grad[ids[0]] += g[:, cols].sum(axis=0)
        else:
            np.add.at(table.grad, ids, g[:, cols])


# --------------------------------------------------------------------------
# sub-sequence selection


def gsu_hard_search(seq_category, target_category, k: int) -> np.ndarray:
    """Indices of the ``k`` most recent items sharing ``target_category``,
    returned in their original (chronological) order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = np.flatnonzero(np.asarray(seq_category) == target_category)
    return hits[-k:]


def recent_window(n: int, k: int) -> np.ndarray:
    return np.arange(max(0, n - k), n)


def _gather_table(rows: list[np.ndarray], k: int):
    index = np.zeros((len(rows), k), dtype=np.int64)
    mask = np.zeros((len(rows), k), dtype=bool)
    for i, r in enumerate(rows):
        index[i, : len(r)] = r
        mask[i, : len(r)] = True
    return index, mask


# --------------------------------------------------------------------------
# forward / backward


class ScoredCandidate(NamedTuple):
    y_imp: float
    y_cli: float
    pitctr: float


@dataclass(eq=False)
class Scores:
    y_imp: np.ndarray
    y_cli: np.ndarray
    y_lv: np.ndarray | None = None

    @property
    def pitctr(self) -> np.ndarray:
        return self.y_imp * self.y_cli

    def candidates(self) -> list[ScoredCandidate]:
        return [ScoredCandidate(float(a), float(b), float(a * b)) for a, b in zip(self.y_imp, self.y_cli)]


@dataclass(eq=False)
class ForwardCache:
    emb: Embedded
    widths: list
    fsm: object = None
    fsm_kind: str = ""
    ram: object = None
    ram_kind: str = ""
    towers: dict = field(default_factory=dict)
    consumed: bool = False


def _forward(req: Request, params: ModelParams, cfg: ModelConfig):
    emb = embed_request(req, params, cfg)
    m, n = req.m, req.n
    cache = ForwardCache(emb, cfg.block_widths())
    blocks = []
    if cfg.fsm_active:
        if cfg.baseline == "avgpool":
            F_cs = np.repeat(emb.F_seq.mean(axis=0, keepdims=True), m, axis=0) if n else np.zeros((m, cfg.d_i))
            cache.fsm_kind = "avgpool" if n else "empty"
        elif n == 0:
            F_cs = np.zeros((m, cfg.attn_dim))
            cache.fsm_kind = "empty"
        elif cfg.baseline == "none":
            res = linear_attention_forward(
                emb.F_can, emb.F_seq, emb.F_seq, attention_params(params, "fsm"), cfg.kernel, cfg.normalize
            )
            F_cs, cache.fsm, cache.fsm_kind = res.output, res.cache, "linear"
        else:
            if cfg.baseline == "din":
                rows = [recent_window(n, cfg.k)] * m
            else:
                cats = req.cand_items[:, cfg.category_field]
                per_cat = {c: gsu_hard_search(req.seq_category, c, cfg.k) for c in np.unique(cats)}
                rows = [per_cat[c] for c in cats]
            index, mask = _gather_table(rows, cfg.k)
            F_cs, cache.fsm = target_attention_forward(emb.F_can, emb.F_seq, index, mask, attention_params(params, "fsm"))
            cache.fsm_kind = "target"
        blocks.append(F_cs)
    if cfg.ram_active:
        p = attention_params(params, "ram")
        if cfg.ram_softmax:
            index = np.tile(np.arange(m), (m, 1))
            F_cc, cache.ram = target_attention_forward(emb.F_can, emb.F_can, index, np.ones_like(index, bool), p)
            cache.ram_kind = "target"
        else:
            res = linear_attention_forward(emb.F_can, emb.F_can, emb.F_can, p, cfg.kernel, cfg.normalize)
            F_cc, cache.ram, cache.ram_kind = res.output, res.cache, "linear"
        blocks.append(F_cc)
    blocks += [emb.F_u, emb.F_cro]
    F = np.concatenate(blocks, axis=1)
    outputs = {}
    for tower in cfg.towers:
        layers, final = tower_layers(params, cfg, tower)
        cache.towers[tower], outputs[tower] = mlp_forward(F, layers, final)
    scores = Scores(outputs["imp"][:, 0], outputs["cli"][:, 0], outputs["lv"][:, 0] if "lv" in outputs else None)
    return scores, cache


def ifa_forward(req: Request, params: ModelParams, cfg: ModelConfig):
    """Score a candidate set with the IFA network; returns ``(Scores, cache)``."""
    if cfg.baseline != "none":
        raise ConfigError(f"ifa_forward called with baseline={cfg.baseline!r}; use baseline_forward")
    return _forward(req, params, cfg)


def baseline_forward(req: Request, params: ModelParams, cfg: ModelConfig):
    if cfg.baseline == "none":
        raise ConfigError("baseline_forward needs cfg.baseline in avgpool|din|sim_hard")
    return _forward(req, params, cfg)


def forward(req: Request, params: ModelParams, cfg: ModelConfig):
    return _forward(req, params, cfg)


def ifa_backward(tower_grads: dict, cache: ForwardCache):
    """Accumulate gradients of every reachable parameter.

    ``tower_grads`` maps tower name to ``dL/dy`` with shape ``(m,)`` or ``(m, 1)``.
    """
    if not isinstance(cache, ForwardCache):
        raise UsageError("ifa_backward needs the cache returned by the forward pass")
    if cache.consumed:
        raise UsageError("forward cache already consumed")
    cache.consumed = True
    emb = cache.emb
    dF = None
    for tower, tc in cache.towers.items():
        g = tower_grads.get(tower)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(-1, 1)
        d = mlp_backward(g, tc)
        dF = d if dF is None else dF + d
    if dF is None:
        return

    grads = {}
    col = 0
    for name, width in cache.widths:
        grads[name] = dF[:, col : col + width]
        col += width

    d_can = np.zeros_like(emb.F_can)
    d_seq = np.zeros_like(emb.F_seq)
    if "cs" in grads:
        g = grads["cs"]
        if cache.fsm_kind == "linear":
            dq, dk, dv = linear_attention_backward(g, cache.fsm)
            d_can += dq
            d_seq += dk + dv
        elif cache.fsm_kind == "target":
            dq, dkv = target_attention_backward(g, cache.fsm)
            d_can += dq
            d_seq += dkv
        elif cache.fsm_kind == "avgpool":
            d_seq += g.sum(axis=0, keepdims=True) / emb.F_seq.shape[0]
    if "cc" in grads:
        g = grads["cc"]
        if cache.ram_kind == "linear":
            dq, dk, dv = linear_attention_backward(g, cache.ram)
            d_can += dq + dk + dv
        else:
            dq, dkv = target_attention_backward(g, cache.ram)
            d_can += dq + dkv
    embed_backward(emb, {"can": d_can, "seq": d_seq, "u": grads["u"], "cro": grads["cro"]})


class IFAModel:
    """Parameters plus config; the object the training loop drives."""

    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    def forward(self, req: Request):
        return _forward(req, self.params, self.cfg)

    def backward(self, tower_grads, cache):
        ifa_backward(tower_grads, cache)

    def score(self, req: Request) -> Scores:
        return _forward(req, self.params, self.cfg)[0]
