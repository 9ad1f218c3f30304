"""Requests, the planted-signal synthetic generator and dataset file IO.

A request holds one user's candidate set (with impression/click labels) and
the user's full behaviour sequence, oldest item first.

Dataset files are JSON lines, one request per line::

    {"user_feats": [17],
     "candidates": [{"item_feats": [..], "cross_feats": [..], "label_imp": 1, "label_cli": 0}, ...],
     "sequence": {"item_feats": [[..], ...], "category": [..]}}

The sequence is stored column-wise to keep lifelong histories compact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DataError


@dataclass(eq=False, frozen=True)
class Request:
    user_feats: np.ndarray  # (n_user_fields,)
    cand_items: np.ndarray  # (m, n_item_fields)
    cand_cross: np.ndarray  # (m, n_cross_fields)
    label_imp: np.ndarray  # (m,) 0/1
    label_cli: np.ndarray  # (m,) 0/1
    seq_items: np.ndarray  # (n, n_item_fields), oldest first
    seq_category: np.ndarray  # (n,)
    label_lv: np.ndarray | None = None  # optional long-view labels

    def __post_init__(self):
        def ints(a, ndim, name):
            arr = np.asarray(a, dtype=np.int64)
            if arr.ndim != ndim:
                raise DataError(f"{name}: expected {ndim}-D ids, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            return arr

        ints(self.user_feats, 1, "user_feats")
        items = ints(self.cand_items, 2, "cand_items")
        ints(self.cand_cross, 2, "cand_cross")
        imp = ints(self.label_imp, 1, "label_imp")
        cli = ints(self.label_cli, 1, "label_cli")
        seq_raw = np.asarray(self.seq_items, dtype=np.int64)
        if seq_raw.size == 0:
            seq_raw = seq_raw.reshape(0, items.shape[1])
        seq = ints(seq_raw, 2, "seq_items")
        cat = ints(self.seq_category, 1, "seq_category")
        if self.label_lv is not None:
            lv = ints(self.label_lv, 1, "label_lv")
        m = items.shape[0]
        if m < 1:
            raise DataError("request has an empty candidate set")
        if self.cand_cross.shape[0] != m or imp.shape[0] != m or cli.shape[0] != m:
            raise DataError("candidate fields disagree on the number of candidates")
        if seq.shape[0] != cat.shape[0]:
            raise DataError("sequence item_feats and category have different lengths")
        if seq.shape[0] and seq.shape[1] != items.shape[1]:
            raise DataError("sequence items and candidates have different feature counts")
        for name, lab in (("label_imp", imp), ("label_cli", cli)):
            if not np.all((lab == 0) | (lab == 1)):
                raise DataError(f"{name} must be 0/1")
        if np.any(cli > imp):
            raise DataError("label_cli = 1 requires label_imp = 1 (click implies impression)")
        if self.label_lv is not None:
            if lv.shape[0] != m or np.any(lv > imp):
                raise DataError("label_lv must align with candidates and imply an impression")

    @property
    def m(self) -> int:
        return self.cand_items.shape[0]

    @property
    def n(self) -> int:
        return self.seq_items.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Request):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True

    __hash__ = None

    def to_record(self) -> dict:
        cands = []
        for i in range(self.m):
            c = {
                "item_feats": self.cand_items[i].tolist(),
                "cross_feats": self.cand_cross[i].tolist(),
                "label_imp": int(self.label_imp[i]),
                "label_cli": int(self.label_cli[i]),
            }
            if self.label_lv is not None:
                c["label_lv"] = int(self.label_lv[i])
            cands.append(c)
        return {
            "user_feats": self.user_feats.tolist(),
            "candidates": cands,
            "sequence": {"item_feats": self.seq_items.tolist(), "category": self.seq_category.tolist()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Request":
        try:
            cands = rec["candidates"]
            seq = rec["sequence"]
            has_lv = bool(cands) and all("label_lv" in c for c in cands)
            n_item = len(cands[0]["item_feats"]) if cands else 0
            seq_items = np.asarray(seq["item_feats"], dtype=np.int64).reshape(-1, n_item)
            return cls(
                user_feats=rec["user_feats"],
                cand_items=[c["item_feats"] for c in cands],
                cand_cross=[c["cross_feats"] for c in cands],
                label_imp=[c["label_imp"] for c in cands],
                label_cli=[c["label_cli"] for c in cands],
                seq_items=seq_items,
                seq_category=seq["category"],
                label_lv=[c["label_lv"] for c in cands] if has_lv else None,
            )
        except KeyError as exc:
            raise DataError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"bad field value: {exc}") from None


def write_dataset(path, requests: Iterable[Request]) -> int:
    count = 0
    with open(path, "w") as fh:
        for req in requests:
            fh.write(json.dumps(req.to_record(), separators=(",", ":")))
            fh.write("\n")
            count += 1
    return count


def read_dataset(path) -> Iterator[Request]:
    """Yield requests lazily; parse failures name the line number."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise DataError("record is not an object")
                yield Request.from_record(rec)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class GenConfig:
    """Planted preference model.

    Every item has a category, a topic and a style, drawn independently.
    Each user prefers a few categories and a few topics and belongs to one
    profile group. The behaviour sequence mixes category-driven items (random
    topic), topic-driven items (random category) and profile items (the
    group's style). Click propensity is::

        sigmoid((base + w_cat * cat_match + w_topic * topic_match
                 + w_profile * profile_offset + noise) / temperature)

    Topic matches cross categories, so a same-category search cannot see
    them; the profile offset is target independent and visible only through
    the sequence as a whole; preferred categories hold far more than ``k``
    sequence items.
    """

    num_users: int = 10000
    num_items: int = 4096
    num_categories: int = 32
    num_topics: int = 32
    num_styles: int = 4
    m: int = 64
    n: int = 1024
    prefs_per_user: int = 2
    w_cat: float = 2.0
    w_topic: float = 2.0
    w_profile: float = 1.0
    base: float = -1.5
    noise: float = 0.5
    temperature: float = 1.0
    impression_budget: int = 8
    category_cap: int = 2
    exploration: float = 0.25
    profile_rate: float = 0.2
    preferred_fraction: tuple = (0.2, 0.6)
    cross_noise: float = 0.3
    long_view: bool = False
    num_requests: int = 1000
    seed: int = 0

    def validate(self):
        for name in ("w_cat", "w_topic", "w_profile", "noise", "exploration", "cross_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.m < 2:
            raise ConfigError("m must be >= 2")
        if self.n < 0:
            raise ConfigError("n must be >= 0")
        if not 1 <= self.impression_budget <= self.m:
            raise ConfigError("impression_budget must lie in [1, m]")
        if self.category_cap < 0:
            raise ConfigError("category_cap must be >= 0 (0 disables the cap)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.prefs_per_user < 1 or self.prefs_per_user > min(self.num_categories, self.num_topics):
            raise ConfigError("prefs_per_user out of range")
        if not 0 <= self.profile_rate <= 1 or not 0 <= self.cross_noise <= 1:
            raise ConfigError("rates must lie in [0, 1]")
        lo, hi = self.preferred_fraction
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("preferred_fraction must satisfy 0 <= lo <= hi <= 1")
        return self

    @property
    def item_vocab(self):
        """Vocabulary sizes of the item fields (id, category, topic, style); id 0 is padding."""
        return (self.num_items + 1, self.num_categories + 1, self.num_topics + 1, self.num_styles + 1)

    @property
    def user_vocab(self):
        return (self.num_users + 1,)

    @property
    def cross_vocab(self):
        return (3,)


@dataclass(eq=False)
class Latent:
    """Ground truth behind one generated request."""

    user: int
    pref_categories: np.ndarray
    pref_topics: np.ndarray
    group: int
    logits: np.ndarray  # planted click logits for each candidate (incl. noise)
    propensity: np.ndarray  # sigmoid(logits / temperature)
    cat_match: np.ndarray
    topic_match: np.ndarray
    categories: np.ndarray  # candidate categories


class SyntheticWorld:
    """Items and users of the planted model; requests are sampled from it."""

    def __init__(self, cfg: GenConfig):
        self.cfg = cfg.validate()
        rng = np.random.default_rng([cfg.seed, 0])
        I, C, T, G = cfg.num_items, cfg.num_categories, cfg.num_topics, cfg.num_styles
        # ids start at 1; index 0 of these arrays is unused padding
        self.item_category = np.concatenate([[0], rng.integers(1, C + 1, size=I)])
        self.item_topic = np.concatenate([[0], rng.integers(1, T + 1, size=I)])
        self.item_style = np.concatenate([[0], rng.integers(1, G + 1, size=I)])
        ids = np.arange(1, I + 1)
        self.by_category = [ids[self.item_category[1:] == c] for c in range(C + 1)]
        self.by_topic = [ids[self.item_topic[1:] == t] for t in range(T + 1)]
        self.by_style = [ids[self.item_style[1:] == s] for s in range(G + 1)]
        U, P = cfg.num_users, cfg.prefs_per_user
        self.user_categories = np.stack([rng.choice(np.arange(1, C + 1), P, replace=False) for _ in range(U + 1)])
        self.user_topics = np.stack([rng.choice(np.arange(1, T + 1), P, replace=False) for _ in range(U + 1)])
        self.user_group = rng.integers(1, G + 1, size=U + 1)
        self.group_offset = np.concatenate([[0.0], np.linspace(-1.0, 1.0, G) if G > 1 else [0.0]])
        # fixed (user, item) noise would need U x I memory; per-request noise is drawn instead

    def item_feats(self, items):
        items = np.asarray(items)
        return np.stack([items, self.item_category[items], self.item_topic[items], self.item_style[items]], axis=-1)

    def _pick(self, rng, pools, size):
        """Draw ``size`` items, each uniformly from a uniformly chosen pool.

        Empty pools (possible in tiny worlds) are dropped; with none left the
        draw falls back to uniform items."""
        pools = [p for p in pools if len(p)] or [np.arange(1, self.cfg.num_items + 1)]
        which = rng.integers(0, len(pools), size=size)
        out = np.empty(size, dtype=np.int64)
        for j, pool in enumerate(pools):
            sel = which == j
            if sel.any():
                out[sel] = rng.choice(pool, size=int(sel.sum()))
        return out

    def sample(self, rng) -> tuple[Request, Latent]:
        cfg = self.cfg
        u = int(rng.integers(1, cfg.num_users + 1))
        cats, tops, grp = self.user_categories[u], self.user_topics[u], int(self.user_group[u])
        cat_pools = [self.by_category[c] for c in cats]
        top_pools = [self.by_topic[t] for t in tops]

        # behaviour sequence, oldest first
        n = cfg.n
        kind = rng.random(n)
        is_profile = kind < cfg.profile_rate
        is_cat = ~is_profile & (rng.random(n) < 0.5)
        is_top = ~is_profile & ~is_cat
        seq = np.empty(n, dtype=np.int64)
        style_pool = self.by_style[grp] if len(self.by_style[grp]) else np.arange(1, cfg.num_items + 1)
        seq[is_profile] = rng.choice(style_pool, size=int(is_profile.sum()))
        seq[is_cat] = self._pick(rng, cat_pools, int(is_cat.sum()))
        seq[is_top] = self._pick(rng, top_pools, int(is_top.sum()))

        # candidate set: preferred pool (categories or topics) mixed with random items
        m = cfg.m
        lo, hi = cfg.preferred_fraction
        n_pref = int(round(rng.uniform(lo, hi) * m))
        pref = self._pick(rng, cat_pools + top_pools, n_pref)
        rand = rng.integers(1, cfg.num_items + 1, size=m - n_pref)
        cands = np.concatenate([pref, rand])
        from_pref = np.concatenate([np.ones(n_pref, bool), np.zeros(m - n_pref, bool)])
        order = rng.permutation(m)
        cands, from_pref = cands[order], from_pref[order]

        cat_match = np.isin(self.item_category[cands], cats).astype(float)
        topic_match = np.isin(self.item_topic[cands], tops).astype(float)
        logits = (
            cfg.base
            + cfg.w_cat * cat_match
            + cfg.w_topic * topic_match
            + cfg.w_profile * self.group_offset[grp]
            + cfg.noise * rng.standard_normal(m)
        )
        prop = 1.0 / (1.0 + np.exp(-logits / cfg.temperature))

        explore = logits + cfg.exploration * rng.gumbel(size=m)
        imp = select_impressions(explore[None, :], self.item_category[cands], cfg)[0].astype(np.int64)
        cli = imp * (rng.random(m) < prop)
        lv = None
        if cfg.long_view:
            lv = cli * (rng.random(m) < 1.0 / (1.0 + np.exp(-(logits - 1.0))))

        # retrieval-channel cross feature, flipped with probability cross_noise
        channel = from_pref.astype(np.int64)
        flip = rng.random(m) < cfg.cross_noise
        channel = np.where(flip, 1 - channel, channel) + 1

        req = Request(
            user_feats=[u],
            cand_items=self.item_feats(cands),
            cand_cross=channel[:, None],
            label_imp=imp,
            label_cli=cli,
            seq_items=self.item_feats(seq).reshape(n, 4),
            seq_category=self.item_category[seq],
            label_lv=lv,
        )
        return req, Latent(u, cats, tops, grp, logits, prop, cat_match, topic_match, self.item_category[cands])


def generate_with_latents(cfg: GenConfig, num_requests: int | None = None) -> Iterator[tuple[Request, Latent]]:
    world = SyntheticWorld(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    count = cfg.num_requests if num_requests is None else num_requests
    for _ in range(count):
        yield world.sample(rng)


def generate(cfg: GenConfig, num_requests: int | None = None) -> Iterator[Request]:
    for req, _ in generate_with_latents(cfg, num_requests):
        yield req


def select_impressions(noisy_logits, categories, cfg: GenConfig) -> np.ndarray:
    """Impression policy: walk candidates by descending noisy logit, skip any
    whose category already holds ``category_cap`` impressions, stop at the
    budget. ``noisy_logits`` is (draws, m); returns a boolean (draws, m) mask."""
    noisy_logits = np.atleast_2d(noisy_logits)
    draws, m = noisy_logits.shape
    order = np.argsort(-noisy_logits, axis=1, kind="stable")
    eligible = np.ones((draws, m), dtype=bool)
    if cfg.category_cap > 0:
        cats = np.asarray(categories)[order]
        _, codes = np.unique(cats, return_inverse=True)
        codes = codes.reshape(draws, m)
        onehot = np.zeros((draws, m, codes.max() + 1), dtype=np.int32)
        np.put_along_axis(onehot, codes[:, :, None], 1, axis=2)
        seen_before = np.take_along_axis(np.cumsum(onehot, axis=1), codes[:, :, None], axis=2)[:, :, 0] - 1
        eligible = seen_before < cfg.category_cap
    taken = eligible & (np.cumsum(eligible, axis=1) <= cfg.impression_budget)
    mask = np.zeros((draws, m), dtype=bool)
    np.put_along_axis(mask, order, taken, axis=1)
    return mask


def impression_probability(latent: Latent, cfg: GenConfig, draws: int = 2000, rng=None) -> np.ndarray:
    """Monte-Carlo P(impressed | candidate set) under the generator's exploration noise.

    The planted noise term is part of ``latent.logits`` so this is exact up
    to sampling error.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    m = latent.logits.shape[0]
    noisy = latent.logits[None, :] + cfg.exploration * rng.gumbel(size=(draws, m))
    return select_impressions(noisy, latent.categories, cfg).mean(axis=0)
