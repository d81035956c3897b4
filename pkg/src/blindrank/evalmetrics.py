"""Accuracy, range, correlation and agreement metrics over prediction records."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .estimates import EstimateRange
from .testset import TIERS, assign_tier

HIT_KS = (25, 50, 100)


class UndefinedMetric(ValueError):
    """Metric undefined for the input (empty set, zero variance, ...)."""


@dataclass
class PredictionRecord:
    """One evaluated university in one ranking system.

    ``actual`` is the ground-truth rank, or the band midpoint for banded ranks.
    ``tier`` is the stratum the university was sampled in.
    """

    name: str
    system: str
    tier: str
    region: str
    calibrated: EstimateRange
    actual: float
    initial: Optional[EstimateRange] = None
    actual_band: Optional[Tuple[int, int]] = None
    features: Optional[Mapping[str, Optional[float]]] = None
    tags: List = field(default_factory=list)
    flags: Tuple[str, ...] = ()

    def estimate(self, which: str = "calibrated") -> EstimateRange:
        est = self.calibrated if which == "calibrated" else self.initial
        if est is None:
            raise UndefinedMetric(f"{self.name}: no {which} estimate")
        return est

    @property
    def midpoint(self) -> float:
        return self.calibrated.midpoint

    @property
    def ae(self) -> float:
        return abs(self.calibrated.midpoint - self.actual)

    @property
    def ae_rounded(self) -> int:
        return round_ae(self.ae)

    @property
    def initial_ae(self) -> Optional[float]:
        return None if self.initial is None else abs(self.initial.midpoint - self.actual)

    @property
    def signed_error(self) -> float:
        return self.calibrated.midpoint - self.actual

    @property
    def width(self) -> float:
        return self.calibrated.width

    @property
    def band_edge_ae(self) -> Optional[float]:
        """Distance to the nearest band edge (0 inside the band)."""
        if self.actual_band is None:
            return None
        lo, hi = self.actual_band
        m = self.calibrated.midpoint
        return max(0.0, lo - m, m - hi)

    def hit(self, k: float) -> bool:
        return self.ae <= k

    def to_dict(self) -> dict:
        return {
            "name": self.name, "system": self.system, "tier": self.tier, "region": self.region,
            "actual": self.actual, "actualBand": list(self.actual_band) if self.actual_band else None,
            "initial": self.initial.to_dict() if self.initial else None,
            "calibrated": self.calibrated.to_dict(),
            "midpoint": self.midpoint, "ae": self.ae, "aeRounded": self.ae_rounded,
            "signedError": self.signed_error, "width": self.width,
            "hits": {str(k): self.hit(k) for k in HIT_KS},
            "features": dict(self.features) if self.features is not None else None,
            "tags": [t.to_dict() if hasattr(t, "to_dict") else t for t in self.tags],
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PredictionRecord":
        from_est = lambda e: EstimateRange.from_dict(e) if e else None  # noqa: E731
        tags = []
        if d.get("tags"):
            from .harness import FailureTag
            tags = [FailureTag.from_dict(t) for t in d["tags"]]
        return cls(d["name"], d["system"], d["tier"], d["region"], from_est(d["calibrated"]),
                   float(d["actual"]), from_est(d.get("initial")),
                   tuple(d["actualBand"]) if d.get("actualBand") else None,
                   d.get("features"), tags, tuple(d.get("flags", ())))


def round_ae(ae: float) -> int:
    """Nearest integer with ties to even, so a half-position miss counts as exact."""
    return int(round(ae))


def fmt_pct(x: float, digits: int = 1) -> str:
    q = Decimal(1).scaleb(-digits)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def _require(records: Sequence) -> None:
    if len(records) == 0:
        raise UndefinedMetric("empty record set")


def _arrays(records: Sequence[PredictionRecord], which: str = "calibrated") -> Tuple[np.ndarray, np.ndarray]:
    _require(records)
    m = np.array([r.estimate(which).midpoint for r in records], dtype=float)
    a = np.array([r.actual for r in records], dtype=float)
    return m, a


def absolute_errors(records: Sequence[PredictionRecord], which: str = "calibrated") -> np.ndarray:
    m, a = _arrays(records, which)
    return np.abs(m - a)


def mae(records, which: str = "calibrated") -> float:
    return float(absolute_errors(records, which).mean())


def median_ae(records, which: str = "calibrated") -> float:
    return float(np.median(absolute_errors(records, which)))


def rmse(records, which: str = "calibrated") -> float:
    m, a = _arrays(records, which)
    return float(np.sqrt(np.mean((m - a) ** 2)))


def signed_error(records, which: str = "calibrated") -> float:
    m, a = _arrays(records, which)
    return float(np.mean(m - a))


def pnmae(records, system_size: int, which: str = "calibrated") -> float:
    """Mean absolute error of ranks rescaled to [0, 1] by the system size, in percent."""
    if system_size < 2:
        raise UndefinedMetric("system size must be >= 2")
    m, a = _arrays(records, which)
    span = system_size - 1
    return float(np.mean(np.abs((m - 1) / span - (a - 1) / span)) * 100)


@dataclass(frozen=True)
class HitRate:
    k: float
    count: int
    n: int

    @property
    def pct(self) -> float:
        return self.count / self.n * 100 if self.n else 0.0

    def __str__(self):
        return f"{fmt_pct(self.pct)}% ({self.count}/{self.n})"


def hit_rate(records, k: float, which: str = "calibrated") -> HitRate:
    if k <= 0:
        raise ValueError("k must be positive")
    if len(records) == 0:
        return HitRate(k, 0, 0)
    ae = absolute_errors(records, which)
    return HitRate(k, int((ae <= k).sum()), len(records))


@dataclass(frozen=True)
class RangeMetrics:
    covered: int
    n: int
    mean_width: float

    @property
    def coverage_pct(self) -> float:
        return self.covered / self.n * 100


def range_metrics(records, which: str = "calibrated") -> RangeMetrics:
    _require(records)
    covered = sum(1 for r in records if r.estimate(which).contains(r.actual))
    widths = [r.estimate(which).width for r in records]
    return RangeMetrics(covered, len(records), float(np.mean(widths)))


def memorization_index(records, which: str = "calibrated") -> float:
    """Share of records that are exact (rounded AE = 0) AND zero-width."""
    _require(records)
    hits = sum(1 for r in records
               if round_ae(abs(r.estimate(which).midpoint - r.actual)) == 0 and r.estimate(which).width == 0)
    return hits / len(records)


def exact_matches(records, which: str = "calibrated") -> int:
    return sum(1 for r in records if round_ae(abs(r.estimate(which).midpoint - r.actual)) == 0)


def wilson_lower(successes: int, n: int, z: float = 1.96) -> float:
    if n < 1 or not 0 <= successes <= n or z <= 0:
        raise ValueError("need 0 <= successes <= n, n >= 1, z > 0")
    p = successes / n
    z2 = z * z
    centre = p + z2 / (2 * n)
    spread = z * math.sqrt((p * (1 - p) + z2 / (4 * n)) / n)
    return max(0.0, (centre - spread) / (1 + z2 / n))


def wilson_claim(successes: int, n: int, z: float = 1.96) -> int:
    """Claimed accuracy in whole percent: floor(100 * lower bound)."""
    return int(math.floor(round(wilson_lower(successes, n, z) * 100, 9)))


# ---------------------------------------------------------------------------
# Correlation

def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=float)
    sx = x[order]
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        raise UndefinedMetric("need two equal-length samples with n >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        raise UndefinedMetric("zero variance")
    return float(dx @ dy) / den


def spearman(x, y) -> float:
    return pearson(average_ranks(x), average_ranks(y))


def _merge_count(a: List[float]) -> Tuple[List[float], int]:
    """Sort ``a`` and count strict inversions (pairs i<j with a[i] > a[j])."""
    n = len(a)
    if n < 2:
        return a, 0
    left, cl = _merge_count(a[: n // 2])
    right, cr = _merge_count(a[n // 2:])
    merged, inv = [], cl + cr
    i = j = 0
    while i < len(left) and j < len(right):
        if right[j] < left[i]:
            merged.append(right[j])
            inv += len(left) - i
            j += 1
        else:
            merged.append(left[i])
            i += 1
    merged.extend(left[i:])
    merged.extend(right[j:])
    return merged, inv


def _tie_pairs(values) -> int:
    _, counts = np.unique(np.asarray(values), return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall tau in O(n log n)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n != len(y) or n < 2:
        raise UndefinedMetric("need two equal-length samples with n >= 2")
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(xs)
    n2 = _tie_pairs(ys)
    n3 = _tie_pairs([f"{a!r}|{b!r}" for a, b in zip(xs, ys)])
    _, swaps = _merge_count(list(ys))
    den = math.sqrt((n0 - n1) * (n0 - n2))
    if den == 0:
        raise UndefinedMetric("zero variance")
    return (n0 - n1 - n2 + n3 - 2 * swaps) / den


@dataclass(frozen=True)
class Correlations:
    spearman: float
    pearson: float
    kendall: float


def correlations(records, which: str = "calibrated") -> Correlations:
    m, a = _arrays(records, which)
    return Correlations(spearman(m, a), pearson(m, a), kendall_tau_b(m, a))


def calibration_ols(records, which: str = "calibrated") -> Tuple[float, float]:
    """(alpha, beta) of the least-squares line predicted = alpha + beta * actual."""
    m, a = _arrays(records, which)
    if len(a) < 2:
        raise UndefinedMetric("need n >= 2")
    va = float(np.var(a))
    if va == 0:
        raise UndefinedMetric("actual ranks have zero variance")
    beta = float(np.mean((a - a.mean()) * (m - m.mean()))) / va
    return float(m.mean() - beta * a.mean()), beta


# ---------------------------------------------------------------------------
# Tier agreement

@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: actual tier, columns: predicted tier
    labels: Tuple[str, ...] = TIERS

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def agreement(self) -> int:
        return int(np.trace(self.counts))

    @property
    def agreement_pct(self) -> float:
        return self.agreement / self.n * 100

    def row(self, tier: str) -> np.ndarray:
        return self.counts[self.labels.index(tier)]


def tier_confusion(records, which: str = "calibrated") -> ConfusionMatrix:
    _require(records)
    counts = np.zeros((len(TIERS), len(TIERS)), dtype=int)
    for r in records:
        counts[TIERS.index(r.tier), TIERS.index(assign_tier(max(1.0, r.estimate(which).midpoint)))] += 1
    return ConfusionMatrix(counts)


def cohens_kappa(matrix) -> float:
    counts = np.asarray(matrix.counts if isinstance(matrix, ConfusionMatrix) else matrix, dtype=float)
    n = counts.sum()
    if n == 0:
        raise UndefinedMetric("empty matrix")
    po = np.trace(counts) / n
    pe = float(counts.sum(axis=1) @ counts.sum(axis=0)) / n ** 2
    if pe == 1:
        raise UndefinedMetric("expected agreement is 1")
    return float((po - pe) / (1 - pe))


# ---------------------------------------------------------------------------
# Summary

@dataclass
class MetricsSummary:
    n: int
    mae: float
    median_ae: float
    rmse: float
    pnmae: float
    signed_error: float
    spearman: Optional[float]
    pearson: Optional[float]
    kendall: Optional[float]
    hits: Dict[int, HitRate]
    wilson_claims: Dict[int, int]
    coverage: RangeMetrics
    alpha: Optional[float]
    beta: Optional[float]
    kappa: Optional[float]
    tier_agreement: int
    memorization_index: float
    exact_matches: int
    confusion: ConfusionMatrix
    per_tier: Dict[str, "MetricsSummary"] = field(default_factory=dict)

    def table_rows(self) -> List[Tuple[str, str]]:
        f = lambda v, d=1: "n/a" if v is None else f"{v:.{d}f}"  # noqa: E731
        rows = [("MAE", f(self.mae)), ("Median AE", f(self.median_ae)), ("RMSE", f(self.rmse)),
                ("PNMAE", f"{self.pnmae:.2f}%"), ("Signed Error", f"{self.signed_error:+.1f}"),
                ("Spearman's rho", f(self.spearman, 3)), ("Pearson's r", f(self.pearson, 3)),
                ("Kendall's tau", f(self.kendall, 3))]
        for k, h in self.hits.items():
            rows.append((f"Hit Rate @{k}", str(h)))
        for k, c in self.wilson_claims.items():
            rows.append((f"Wilson-claimed @{k}", f">={c}%"))
        rows += [("Range Coverage", f"{fmt_pct(self.coverage.coverage_pct)}% ({self.coverage.covered}/{self.n})"),
                 ("Mean Range Width", f"{self.coverage.mean_width:.1f} positions"),
                 ("Calibration Slope beta", f(self.beta, 3)), ("Calibration Intercept alpha", f(self.alpha)),
                 ("Cohen's kappa (tier)", f(self.kappa, 3)),
                 ("Tier Agreement", f"{fmt_pct(self.tier_agreement / self.n * 100)}% ({self.tier_agreement}/{self.n})"),
                 ("Memorization Index", f"{self.memorization_index:.3f} "
                                        f"({round(self.memorization_index * self.n)}/{self.n})"),
                 ("AE=0 (exact matches)", str(self.exact_matches))]
        return rows


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric:
        return None


def summarize(records: Sequence[PredictionRecord], system_size: int, which: str = "calibrated",
              per_tier: bool = True) -> MetricsSummary:
    _require(records)
    corr = _safe(correlations, records, which)
    ols = _safe(calibration_ols, records, which)
    hits = {k: hit_rate(records, k, which) for k in HIT_KS}
    confusion = tier_confusion(records, which)
    s = MetricsSummary(
        n=len(records), mae=mae(records, which), median_ae=median_ae(records, which),
        rmse=rmse(records, which), pnmae=pnmae(records, system_size, which),
        signed_error=signed_error(records, which),
        spearman=corr.spearman if corr else None, pearson=corr.pearson if corr else None,
        kendall=corr.kendall if corr else None, hits=hits,
        wilson_claims={k: wilson_claim(h.count, h.n) for k, h in hits.items()},
        coverage=range_metrics(records, which),
        alpha=ols[0] if ols else None, beta=ols[1] if ols else None,
        kappa=_safe(cohens_kappa, confusion), tier_agreement=confusion.agreement,
        memorization_index=memorization_index(records, which),
        exact_matches=exact_matches(records, which), confusion=confusion,
    )
    if per_tier:
        for tier in TIERS:
            sub = [r for r in records if r.tier == tier]
            if sub:
                s.per_tier[tier] = summarize(sub, system_size, which, per_tier=False)
    return s
