"""Forward-pass timing of linear vs dense kernel attention and log-log slope fits."""

from __future__ import annotations

import ctypes
import ctypes.util
import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import ORACLE_MAX_CELLS, AttentionParams, dense_kernel_attention_oracle, linear_attention_forward

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3
_ALLOC_LIMIT = 32 * 1024 * 1024  # glibc's ceiling for the mmap threshold on 64-bit
_allocator_pinned = False


@dataclass
class BenchCell:
    m: int
    n: int
    kind: str
    mean_s: float
    std_s: float
    reps: int

    @property
    def per_item_s(self):
        return self.mean_s / self.m


@dataclass
class BenchResult:
    kind: str
    d: int
    cells: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (m, n, reason)
    slope: float | None = None
    slope_axis: str = ""

    def records(self):
        return [asdict(c) for c in self.cells]


def _sizes(text: str) -> list[int]:
    text = text.strip()
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo < 1 or hi < lo:
            raise ValueError(f"bad range {text!r}")
        out = []
        while lo <= hi:
            out.append(lo)
            lo *= 2
        return out
    return [int(x) for x in text.split(",") if x.strip()]


def parse_grid(text: str) -> list[tuple[int, int]]:
    """Parse ``s=256..16384`` (m = n = s, doubling), ``m=1024;n=256..16384``
    or explicit comma lists into (m, n) pairs."""
    parts = {}
    for chunk in re.split(r"[;\s]+", text.strip()):
        if not chunk:
            continue
        key, sep, value = chunk.partition("=")
        if not sep or key not in ("s", "m", "n"):
            raise ValueError(f"bad grid component {chunk!r}; expected s=, m= or n=")
        parts[key] = _sizes(value)
    if "s" in parts:
        if len(parts) > 1:
            raise ValueError("s= cannot be combined with m= or n=")
        return [(s, s) for s in parts["s"]]
    if "m" not in parts or "n" not in parts:
        raise ValueError("grid needs s=, or both m= and n=")
    return [(m, n) for m in parts["m"] for n in parts["n"]]


def loglog_slope(x, t) -> float:
    x, t = np.asarray(x, dtype=float), np.asarray(t, dtype=float)
    return float(np.polyfit(np.log(x), np.log(t), 1)[0])


def _calibrate(fn, min_time):
    """Calls per repetition so one repetition lasts at least ``min_time`` seconds."""
    number = 1
    while True:
        start = time.perf_counter()
        for _ in range(number):
            fn()
        if time.perf_counter() - start >= min_time or number >= 1 << 20:
            return number
        number *= 2


def time_call(fn, reps=5, warmup=2, min_time=0.02):
    """Seconds per call for each of ``reps`` repetitions after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    number = _calibrate(fn, min_time)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        for _ in range(number):
            fn()
        times.append((time.perf_counter() - start) / number)
    return times


def pin_allocator() -> bool:
    """Keep glibc from serving (and returning) large temporaries via fresh mmaps.

    By default blocks over 128 KiB are mmapped per allocation, so every
    forward pass above s=512 pays page faults that the smaller sizes do not,
    which bends the log-log slope. Process-wide and idempotent; a no-op off
    glibc.
    """
    global _allocator_pinned
    if _allocator_pinned:
        return True
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name) if name else None
        mallopt = libc.mallopt if libc is not None else None
    except (OSError, AttributeError):
        mallopt = None
    if mallopt is None:
        log.info("mallopt unavailable; allocator left at defaults")
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, _ALLOC_LIMIT) == 1 and mallopt(_M_TRIM_THRESHOLD, 2 * _ALLOC_LIMIT) == 1
    _allocator_pinned = ok
    if not ok:
        log.warning("mallopt refused the mmap/trim thresholds; timings may include page-fault noise")
    return ok


def run_bench(grid, kind="linear", d=32, reps=5, warmup=2, seed=0, kernel="relu_eps", min_time=0.02, threads=1):
    """Time one attention forward per grid cell; dense cells above the
    oracle's size guard are skipped and noted."""
    if kind not in ("linear", "dense"):
        raise ValueError(f"kind must be linear or dense, got {kind!r}")
    if reps < 5:
        raise ValueError("reps must be >= 5")
    if warmup < 2:
        raise ValueError("warmup must be >= 2")
    pin_allocator()
    rng = np.random.default_rng(seed)
    p = AttentionParams.init(rng, d, d, d, d)
    result = BenchResult(kind, d)
    with threadpool_limits(limits=threads):
        for m, n in grid:
            if kind == "dense" and m * n > ORACLE_MAX_CELLS:
                result.skipped.append((m, n, f"m*n={m * n} exceeds dense guard {ORACLE_MAX_CELLS}"))
                continue
            E_Q = rng.normal(size=(m, d))
            E_K = rng.normal(size=(n, d))
            E_V = rng.normal(size=(n, d))
            if kind == "linear":
                fn = lambda: linear_attention_forward(E_Q, E_K, E_V, p, kernel)  # noqa: E731
            else:
                fn = lambda: dense_kernel_attention_oracle(E_Q, E_K, E_V, p, kernel)  # noqa: E731
            times = time_call(fn, reps, warmup, min_time)
            result.cells.append(BenchCell(m, n, kind, float(np.mean(times)), float(np.std(times)), len(times)))
    cells = result.cells
    if len(cells) >= 2:
        ms = {c.m for c in cells}
        ns = {c.n for c in cells}
        if all(c.m == c.n for c in cells):
            result.slope_axis = "s"
            result.slope = loglog_slope([c.m for c in cells], [c.mean_s for c in cells])
        elif len(ms) == 1:
            result.slope_axis = "n"
            result.slope = loglog_slope([c.n for c in cells], [c.mean_s for c in cells])
        elif len(ns) == 1:
            result.slope_axis = "m"
            result.slope = loglog_slope([c.m for c in cells], [c.mean_s for c in cells])
    return result


def write_records(path_or_fh, result: BenchResult):
    lines = [json.dumps(r) for r in result.records()]
    text = "\n".join(lines) + ("\n" if lines else "")
    if hasattr(path_or_fh, "write"):
        path_or_fh.write(text)
    else:
        with open(path_or_fh, "w") as fh:
            fh.write(text)
