"""Bibliometric feature computation and tier-relative normalization.

The 16 indicators are derived from a :class:`RawInstitutionData` record covering
the 2020-2025 publication window. Normalized scores use a clamped linear map
between a floor and a ceiling; Z-scores are taken against the tier whose mean is
closest to the observed value.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

WINDOW = (2020, 2025)

FEATURE_NAMES = (
    "worksCount",
    "citedByCount",
    "hIndex",
    "i10Index",
    "twoYearMeanCitedness",
    "citationsPerWork",
    "fiveYearWorksGrowthPct",
    "fiveYearCitationGrowthPct",
    "researchExcellencePct",
    "intlCollaborationPct",
    "openAccessPct",
    "disciplinaryBreadth",
    "normalizedResearch",
    "normalizedImpact",
    "normalizedExcellence",
    "influentialRatio",
)

SHARE_PCT_FEATURES = ("researchExcellencePct", "intlCollaborationPct", "openAccessPct")
SCORE_FEATURES = ("normalizedResearch", "normalizedImpact", "normalizedExcellence")

TIER_LABELS = ("Tier1", "Tier2", "Tier3", "Tier4")

# Human-readable metric labels used in Z-score signal strings.
METRIC_LABELS = {
    "hIndex": "h-index",
    "twoYearMeanCitedness": "2yr mean citedness",
    "researchExcellencePct": "research excellence %",
    "intlCollaborationPct": "intl. collaboration %",
    "worksCount": "works count",
    "citationsPerWork": "citations per work",
}

# Data-quality flags
FLAG_EMPTY_SERIES = "empty_yearly_series"
FLAG_ZERO_BASE_WORKS = "zero_base_year_works"
FLAG_ZERO_BASE_CITATIONS = "zero_base_year_citations"
FLAG_NO_WORKS = "no_works"
FLAG_NO_ENRICHMENT = "no_influential_data"


class ConfigurationError(ValueError):
    """Invalid benchmark or normalization configuration."""


@dataclass(frozen=True)
class TopWork:
    title: str
    doi: Optional[str]
    citations: int
    fwci: Optional[float] = None
    citation_percentile: Optional[float] = None
    tldr: Optional[str] = None
    influential_citations: Optional[int] = None


@dataclass(frozen=True)
class RawInstitutionData:
    """Everything fetched for one institution; inputs to :func:`compute_features`."""

    institution_id: str
    display_name: str
    country_code: str
    works_by_year: Mapping[int, int]
    citations_by_year: Mapping[int, int]
    field_distribution: Mapping[str, int]
    intl_collab_count: int
    open_access_count: int
    top_works: Tuple[TopWork, ...]
    excellence_count: int
    h_index: int
    i10_index: int
    two_year_mean_citedness: float
    collaboration_countries: Mapping[str, int] = field(default_factory=dict)
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        counts = [self.intl_collab_count, self.open_access_count, self.excellence_count,
                  self.h_index, self.i10_index]
        counts += list(self.works_by_year.values()) + list(self.citations_by_year.values())
        counts += list(self.field_distribution.values())
        if any(c < 0 for c in counts):
            raise ValueError(f"{self.institution_id}: negative count")
        if sum(self.field_distribution.values()) > self.works_count:
            raise ValueError(f"{self.institution_id}: field counts exceed total works")
        cites = [w.citations for w in self.top_works]
        if cites != sorted(cites, reverse=True):
            raise ValueError(f"{self.institution_id}: top works not sorted by citations")

    @property
    def works_count(self) -> int:
        return int(sum(self.works_by_year.get(y, 0) for y in _window_years()))

    @property
    def cited_by_count(self) -> int:
        return int(sum(self.citations_by_year.get(y, 0) for y in _window_years()))

    @property
    def has_enrichment(self) -> bool:
        return any(w.influential_citations is not None for w in self.top_works)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["works_by_year"] = {str(k): v for k, v in sorted(self.works_by_year.items())}
        d["citations_by_year"] = {str(k): v for k, v in sorted(self.citations_by_year.items())}
        d["top_works"] = [asdict(w) for w in self.top_works]
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RawInstitutionData":
        d = dict(d)
        d["works_by_year"] = {int(k): int(v) for k, v in d["works_by_year"].items()}
        d["citations_by_year"] = {int(k): int(v) for k, v in d["citations_by_year"].items()}
        d["top_works"] = tuple(TopWork(**w) for w in d["top_works"])
        d["flags"] = tuple(d.get("flags", ()))
        return cls(**d)


def _window_years(window: Tuple[int, int] = WINDOW) -> range:
    return range(window[0], window[1] + 1)


@dataclass(frozen=True)
class FeatureVector:
    """The 16 indicators for one institution.

    ``influentialRatio`` is ``None`` when no Semantic Scholar enrichment exists.
    ``flags`` carries data-quality flags and is not one of the 16 features.
    """

    worksCount: float
    citedByCount: float
    hIndex: float
    i10Index: float
    twoYearMeanCitedness: float
    citationsPerWork: float
    fiveYearWorksGrowthPct: float
    fiveYearCitationGrowthPct: float
    researchExcellencePct: float
    intlCollaborationPct: float
    openAccessPct: float
    disciplinaryBreadth: float
    normalizedResearch: float
    normalizedImpact: float
    normalizedExcellence: float
    influentialRatio: Optional[float]
    flags: Tuple[str, ...] = field(default=(), compare=False)

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in FEATURE_NAMES}

    def as_array(self, fill_missing: float = np.nan) -> np.ndarray:
        vals = [getattr(self, n) for n in FEATURE_NAMES]
        return np.array([fill_missing if v is None else v for v in vals], dtype=float)

    @classmethod
    def from_dict(cls, d: Mapping, flags: Iterable[str] = ()) -> "FeatureVector":
        return cls(**{n: d[n] for n in FEATURE_NAMES}, flags=tuple(flags))


assert len(FEATURE_NAMES) == 16
assert tuple(f.name for f in fields(FeatureVector))[:16] == FEATURE_NAMES


@dataclass(frozen=True)
class MetricBenchmark:
    mean: float
    sd: float
    floor: float
    ceiling: float
    source: str = "published"


@dataclass(frozen=True)
class TierBenchmark:
    tier: str
    metrics: Mapping[str, MetricBenchmark]

    def __post_init__(self):
        for name, m in self.metrics.items():
            if m.floor > m.ceiling:
                raise ConfigurationError(f"{self.tier}/{name}: floor > ceiling")
            if not m.sd > 0:
                raise ConfigurationError(f"{self.tier}/{name}: sd must be positive")


@dataclass(frozen=True)
class ScoreComposition:
    """Which raw metrics feed each 0-100 score (equal-weight mean per score)."""

    research: Tuple[str, ...] = ("worksCount",)
    impact: Tuple[str, ...] = ("twoYearMeanCitedness", "citationsPerWork")
    excellence: Tuple[str, ...] = ("researchExcellencePct",)


DEFAULT_COMPOSITION = ScoreComposition()


def load_benchmarks(path: Union[str, Path, None] = None) -> List[TierBenchmark]:
    """Load the tier benchmark fixture (defaults to the shipped table)."""
    if path is None:
        text = resources.files("blindrank").joinpath("data/tier_benchmarks.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if doc.get("format") != "blindrank-tier-benchmarks":
        raise ConfigurationError("not a tier benchmark file")
    if doc.get("version") != 1:
        raise ConfigurationError(f"unsupported benchmark version {doc.get('version')}")
    per_tier: Dict[str, Dict[str, MetricBenchmark]] = {}
    for rec in doc["records"]:
        per_tier.setdefault(rec["tier"], {})[rec["metric"]] = MetricBenchmark(
            mean=float(rec["mean"]), sd=float(rec["sd"]),
            floor=float(rec["floor"]), ceiling=float(rec["ceiling"]),
            source=rec.get("source", "published"),
        )
    return [TierBenchmark(t, per_tier[t]) for t in sorted(per_tier)]


def save_benchmarks(benchmarks: Sequence[TierBenchmark], path: Union[str, Path], notes: str = "") -> None:
    records = []
    for tb in benchmarks:
        for metric, m in tb.metrics.items():
            records.append({"tier": tb.tier, "metric": metric, "mean": m.mean, "sd": m.sd,
                            "floor": m.floor, "ceiling": m.ceiling, "source": m.source})
    doc = {"format": "blindrank-tier-benchmarks", "version": 1, "notes": notes, "records": records}
    Path(path).write_text(json.dumps(doc, indent=2))


def build_benchmarks(features_by_tier: Mapping[str, Sequence[FeatureVector]],
                     metrics: Sequence[str] = ("hIndex", "twoYearMeanCitedness",
                                               "researchExcellencePct", "intlCollaborationPct",
                                               "worksCount", "citationsPerWork")) -> List[TierBenchmark]:
    """Empirical benchmarks: mean, sample SD and p25/p75 per tier and metric."""
    out = []
    for tier in sorted(features_by_tier):
        vecs = features_by_tier[tier]
        if len(vecs) < 2:
            raise ConfigurationError(f"{tier}: need at least two institutions")
        per_metric = {}
        for m in metrics:
            vals = np.array([getattr(v, m) for v in vecs], dtype=float)
            sd = float(np.std(vals, ddof=1))
            if sd <= 0:
                raise ConfigurationError(f"{tier}/{m}: zero spread")
            per_metric[m] = MetricBenchmark(
                mean=float(vals.mean()), sd=sd,
                floor=float(np.percentile(vals, 25)), ceiling=float(np.percentile(vals, 75)),
                source="empirical",
            )
        out.append(TierBenchmark(tier, per_metric))
    return out


def normalize_metric(v: float, floor: float, ceiling: float) -> float:
    """Clamped linear score in [0, 100]."""
    if not ceiling > floor:
        raise ConfigurationError(f"ceiling ({ceiling}) must exceed floor ({floor})")
    score = (v - floor) / (ceiling - floor) * 100.0
    return min(100.0, max(0.0, score))


def z_score(v: float, mu: float, sigma: float) -> float:
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    return (v - mu) / sigma


def _tier_number(label: str) -> int:
    digits = "".join(ch for ch in label if ch.isdigit())
    return int(digits) if digits else 0


def closest_tier(metric: str, v: float, benchmarks: Sequence[TierBenchmark]) -> str:
    """Tier whose mean for ``metric`` is nearest to ``v``; ties go to the better tier."""
    if not benchmarks:
        raise ConfigurationError("no benchmarks")
    candidates = [tb for tb in benchmarks if metric in tb.metrics]
    if not candidates:
        raise KeyError(f"unknown metric {metric!r}")
    best = min(candidates, key=lambda tb: (abs(v - tb.metrics[metric].mean), _tier_number(tb.tier)))
    return best.tier


def disciplinary_breadth(field_dist: Mapping[str, float]) -> float:
    """Normalized Shannon entropy (base 2) over fields with nonzero counts."""
    counts = np.array([c for c in field_dist.values() if c > 0], dtype=float)
    k = len(counts)
    if k <= 1:
        return 0.0
    p = counts / counts.sum()
    h = float(-(p * np.log2(p)).sum())
    return min(1.0, max(0.0, h / math.log2(k)))


def _pct(part: float, whole: float) -> float:
    if whole <= 0:
        return 0.0
    return min(100.0, max(0.0, part / whole * 100.0))


def _growth(series: Mapping[int, int], window: Tuple[int, int], zero_flag: str, flags: List[str]) -> float:
    if not series:
        return 0.0
    first = series.get(window[0], 0)
    last = series.get(window[1], 0)
    if first <= 0:
        flags.append(zero_flag)
        return 0.0
    return (last - first) / first * 100.0


def score_bounds(metric: str, benchmarks: Sequence[TierBenchmark]) -> Tuple[float, float]:
    """Floor from the lowest tier, ceiling from the highest tier."""
    tiers = sorted((tb for tb in benchmarks if metric in tb.metrics), key=lambda tb: _tier_number(tb.tier))
    if not tiers:
        raise KeyError(f"no benchmark for {metric!r}")
    return tiers[-1].metrics[metric].floor, tiers[0].metrics[metric].ceiling


def compute_features(raw: RawInstitutionData,
                     benchmarks: Optional[Sequence[TierBenchmark]] = None,
                     composition: ScoreComposition = DEFAULT_COMPOSITION,
                     window: Tuple[int, int] = WINDOW) -> FeatureVector:
    """Compute the 16-indicator feature vector.

    Division by zero never raises: affected values are 0 and a flag is set.
    Growth rates are not clamped (they may be negative or exceed 100).
    """
    if benchmarks is None:
        benchmarks = default_benchmarks()
    flags: List[str] = list(raw.flags)
    works = raw.works_count
    cites = raw.cited_by_count
    if works == 0:
        flags.append(FLAG_NO_WORKS)
    if not raw.works_by_year and not raw.citations_by_year:
        flags.append(FLAG_EMPTY_SERIES)

    base = {
        "worksCount": float(works),
        "citedByCount": float(cites),
        "hIndex": float(raw.h_index),
        "i10Index": float(raw.i10_index),
        "twoYearMeanCitedness": float(raw.two_year_mean_citedness),
        "citationsPerWork": cites / works if works > 0 else 0.0,
        "fiveYearWorksGrowthPct": _growth(raw.works_by_year, window, FLAG_ZERO_BASE_WORKS, flags),
        "fiveYearCitationGrowthPct": _growth(raw.citations_by_year, window, FLAG_ZERO_BASE_CITATIONS, flags),
        "researchExcellencePct": _pct(raw.excellence_count, works),
        "intlCollaborationPct": _pct(raw.intl_collab_count, works),
        "openAccessPct": _pct(raw.open_access_count, works),
        "disciplinaryBreadth": disciplinary_breadth(raw.field_distribution) if works > 0 else 0.0,
    }

    def score(names: Sequence[str]) -> float:
        parts = []
        for n in names:
            lo, hi = score_bounds(n, benchmarks)
            parts.append(normalize_metric(base[n], lo, hi))
        return float(np.mean(parts))

    base["normalizedResearch"] = score(composition.research)
    base["normalizedImpact"] = score(composition.impact)
    base["normalizedExcellence"] = score(composition.excellence)

    enriched = [w for w in raw.top_works if w.influential_citations is not None]
    total = sum(w.citations for w in enriched)
    if enriched and total > 0:
        infl = sum(w.influential_citations for w in enriched)
        base["influentialRatio"] = min(1.0, max(0.0, infl / total))
    else:
        base["influentialRatio"] = None
        flags.append(FLAG_NO_ENRICHMENT)

    return FeatureVector(**base, flags=tuple(dict.fromkeys(flags)))


@dataclass(frozen=True)
class ZScoreEntry:
    metric: str
    value: float
    closest_tier: str
    z: float
    signal: str


@dataclass(frozen=True)
class ZScoreReport:
    entries: Tuple[ZScoreEntry, ...]

    def __getitem__(self, metric: str) -> ZScoreEntry:
        for e in self.entries:
            if e.metric == metric:
                return e
        raise KeyError(metric)


def _signal(metric: str, z: float, tier: str) -> str:
    label = METRIC_LABELS.get(metric, metric)
    return f"{label}: {z:+.1f}σ from Tier {_tier_number(tier)} mean"


def zscore_report(features: FeatureVector, benchmarks: Optional[Sequence[TierBenchmark]] = None,
                  metrics: Sequence[str] = ("hIndex", "twoYearMeanCitedness",
                                            "researchExcellencePct", "intlCollaborationPct")) -> ZScoreReport:
    if benchmarks is None:
        benchmarks = default_benchmarks()
    entries = []
    for m in metrics:
        v = getattr(features, m)
        tier = closest_tier(m, v, benchmarks)
        bm = next(tb for tb in benchmarks if tb.tier == tier).metrics[m]
        z = z_score(v, bm.mean, bm.sd)
        entries.append(ZScoreEntry(m, v, tier, z, _signal(m, z, tier)))
    return ZScoreReport(tuple(entries))


def tier_positioning(features: FeatureVector, benchmarks: Optional[Sequence[TierBenchmark]] = None) -> Dict[str, Dict[str, float]]:
    """Z-score of each benchmarked metric against every tier."""
    if benchmarks is None:
        benchmarks = default_benchmarks()
    out: Dict[str, Dict[str, float]] = {}
    for tb in sorted(benchmarks, key=lambda t: _tier_number(t.tier)):
        for m, bm in tb.metrics.items():
            v = getattr(features, m)
            out.setdefault(m, {})[tb.tier] = round(z_score(v, bm.mean, bm.sd), 3)
    return out


def metrics_below_tier(features: FeatureVector, tier: TierBenchmark, n_sd: float = 3.0,
                       metrics: Sequence[str] = ("worksCount", "hIndex", "twoYearMeanCitedness",
                                                 "researchExcellencePct", "intlCollaborationPct")) -> List[str]:
    """Metrics sitting more than ``n_sd`` SDs below the tier mean."""
    out = []
    for m in metrics:
        bm = tier.metrics.get(m)
        if bm is None:
            continue
        if getattr(features, m) < bm.mean - n_sd * bm.sd:
            out.append(m)
    return out


_DEFAULT: Optional[List[TierBenchmark]] = None


def default_benchmarks() -> List[TierBenchmark]:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_benchmarks()
    return _DEFAULT


def benchmark_tier_for_rank(rank: float) -> str:
    """Benchmark tier matching an actual rank (Top 10 / 100 / 300 / beyond)."""
    if rank <= 10:
        return "Tier1"
    if rank <= 100:
        return "Tier2"
    if rank <= 300:
        return "Tier3"
    return "Tier4"
