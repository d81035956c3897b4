"""Paired and grouped nonparametric tests plus percentile bootstrap intervals."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import special

from .evalmetrics import average_ranks

ALPHA = 0.05
EXACT_WILCOXON_MAX_N = 25
EXACT_KRUSKAL_MAX_N = 8
BOOTSTRAP_BLOCK = 500


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    name: str
    statistic: float
    p_value: float
    n: int
    method: str = ""
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA

    def to_dict(self) -> dict:
        return {"test": self.name, "statistic": self.statistic, "p": self.p_value, "n": self.n,
                "method": self.method, "degenerate": self.degenerate, "significant": self.significant}


def normal_two_sided(z: float) -> float:
    return float(min(1.0, 2 * special.ndtr(-abs(z))))


def chi2_sf(x: float, df: int) -> float:
    if x <= 0:
        return 1.0
    return float(special.chdtrc(df, x))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank

def _signed_rank_null(doubled: Sequence[int]) -> np.ndarray:
    """Counts of each doubled W+ value over all 2^n sign assignments."""
    total = int(sum(doubled))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float], method: str = "auto") -> TestResult:
    """Two-sided test on the paired differences x - y; statistic is min(W+, W-).

    Zero differences are dropped. ``method="auto"`` uses the exact null
    distribution (ties allowed) up to 25 nonzero pairs, else the
    tie-corrected normal approximation without continuity correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("paired samples must have equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return TestResult("wilcoxon", 0.0, 1.0, 0, "degenerate", degenerate=True)
    if n < 5:
        raise ValueError(f"need at least 5 nonzero differences, got {n}")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if n <= EXACT_WILCOXON_MAX_N else "normal"
    if method == "exact":
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _signed_rank_null(doubled)
        total = sum(doubled)
        w2 = int(round(2 * w))
        t = np.arange(total + 1)
        mask = np.minimum(t, total - t) <= w2
        p = float(counts[mask].sum() / counts.sum())
    elif method == "normal":
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        mean = n * (n + 1) / 4
        var = n * (n + 1) * (2 * n + 1) / 24 - float((tie_counts ** 3 - tie_counts).sum()) / 48
        p = normal_two_sided((w - mean) / math.sqrt(var))
    else:
        raise ValueError(f"unknown method {method!r}")
    return TestResult("wilcoxon", w, min(1.0, p), n, method)


# ---------------------------------------------------------------------------
# McNemar

def mcnemar(hits_before: Sequence[bool], hits_after: Sequence[bool], correction: bool = False) -> TestResult:
    """Chi-square McNemar test, df = 1. b = hit before only, c = hit after only."""
    if len(hits_before) != len(hits_after):
        raise ValueError("paired samples must have equal length")
    b = sum(1 for u, v in zip(hits_before, hits_after) if u and not v)
    c = sum(1 for u, v in zip(hits_before, hits_after) if v and not u)
    return mcnemar_counts(b, c, correction, n=len(hits_before))


def mcnemar_counts(b: int, c: int, correction: bool = False, n: Optional[int] = None) -> TestResult:
    n = b + c if n is None else n
    if b + c == 0:
        return TestResult("mcnemar", 0.0, 1.0, n, "degenerate", degenerate=True)
    diff = abs(b - c)
    if correction:
        diff = max(0.0, diff - 1)
    chi2 = diff ** 2 / (b + c)
    return TestResult("mcnemar", float(chi2), chi2_sf(chi2, 1), n,
                      "chi2-corrected" if correction else "chi2")


# ---------------------------------------------------------------------------
# Kruskal-Wallis

def _h_statistic(ranks: np.ndarray, sizes: Sequence[int], tie_factor: float) -> float:
    n = len(ranks)
    acc, start = 0.0, 0
    for k in sizes:
        acc += ranks[start:start + k].sum() ** 2 / k
        start += k
    h = 12 / (n * (n + 1)) * acc - 3 * (n + 1)
    return h / tie_factor


def _assignments(n: int, sizes: Sequence[int]):
    """Every split of range(n) into ordered groups of the given sizes."""
    if len(sizes) == 1:
        yield [tuple(range(n))] if n == sizes[0] else []
        return

    def rec(pool, rest):
        if len(rest) == 1:
            yield [pool]
            return
        for combo in itertools.combinations(pool, rest[0]):
            left = tuple(i for i in pool if i not in combo)
            for tail in rec(left, rest[1:]):
                yield [combo] + tail

    yield from rec(tuple(range(n)), list(sizes))


def kruskal_wallis(groups: Sequence[Sequence[float]], method: str = "auto") -> TestResult:
    """Tie-corrected H. p from chi-square(df = k - 1), or the exact permutation
    distribution of H when the pooled size is at most 8."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise ValueError("need at least two nonempty groups")
    pooled = np.concatenate(groups)
    n = len(pooled)
    sizes = [len(g) for g in groups]
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_factor = 1 - float((tie_counts ** 3 - tie_counts).sum()) / (n ** 3 - n) if n > 1 else 0.0
    if tie_factor <= 0:
        return TestResult("kruskal", 0.0, 1.0, n, "degenerate", degenerate=True)
    ranks = average_ranks(pooled)
    h = float(_h_statistic(ranks, sizes, tie_factor))
    if method == "auto":
        method = "exact" if n <= EXACT_KRUSKAL_MAX_N else "chi2"
    if method == "exact":
        eps = 1e-9 * max(1.0, abs(h))
        hits = total = 0
        for split in _assignments(n, sizes):
            order = np.concatenate([ranks[list(g)] for g in split])
            total += 1
            if _h_statistic(order, sizes, tie_factor) >= h - eps:
                hits += 1
        p = hits / total
    elif method == "chi2":
        p = chi2_sf(h, len(groups) - 1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return TestResult("kruskal", max(0.0, h), min(1.0, p), n, method)


# ---------------------------------------------------------------------------
# Bootstrap

@dataclass(frozen=True)
class BootstrapCI:
    statistic: str
    point: float
    lower: float
    upper: float
    B: int
    level: float = 0.95

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "point": self.point, "lower": self.lower,
                "upper": self.upper, "B": self.B, "level": self.level}


def bootstrap_ci(records: Sequence, statistic: Callable[[Sequence], float], B: int = 10_000,
                 seed: int = 0, level: float = 0.95, name: str = "",
                 workers: int = 1) -> BootstrapCI:
    """Percentile bootstrap. Resamples come in fixed blocks, each with its own
    child seed, so the result does not depend on ``workers``.

    The percentile interval need not contain the point estimate for skewed
    statistics.
    """
    n = len(records)
    if n < 2:
        raise ValueError("need n >= 2")
    if B < 100:
        raise ValueError("need B >= 100")
    is_array = isinstance(records, np.ndarray)
    seqs = np.random.SeedSequence(seed).spawn(math.ceil(B / BOOTSTRAP_BLOCK))
    sizes = [min(BOOTSTRAP_BLOCK, B - i * BOOTSTRAP_BLOCK) for i in range(len(seqs))]

    def run_block(i: int) -> List[float]:
        rng = np.random.default_rng(seqs[i])
        idx = rng.integers(0, n, size=(sizes[i], n))
        if is_array:
            return [float(statistic(records[row])) for row in idx]
        return [float(statistic([records[j] for j in row])) for row in idx]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(run_block, range(len(seqs))))
    else:
        blocks = [run_block(i) for i in range(len(seqs))]
    values = np.concatenate([np.asarray(b) for b in blocks])
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(values, [tail, 100 - tail])
    return BootstrapCI(name or getattr(statistic, "__name__", "statistic"), float(statistic(records)),
                       float(lo), float(hi), B, level)
