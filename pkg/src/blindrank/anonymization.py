"""Anonymization of institution profiles and leak verification."""

from __future__ import annotations

import csv
import json
import random
import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from .bibliometrics import (FeatureVector, RawInstitutionData, TierBenchmark, ZScoreReport,
                            compute_features, default_benchmarks, tier_positioning, zscore_report)

REDACTED = "REDACTED"
ID_PATTERN = re.compile(r"^INST-[0-9A-F]{8}$")

# Words common to institution names that identify nothing on their own; excluded
# from token matching (the full name is still matched as a phrase).
GENERIC_NAME_WORDS = frozenset("""
university universite universitat universidad universidade universita universiteit uniwersytet
universiti univerzita universitatea egyetem institute institut instituto istituto college school
schools national state technology technological technical technische sciences science research
medical medicine academy polytechnic politecnico polytechnique center centre federal royal higher
studies studi hochschule catholic saint free open international city faculty health campus system
applied superior superiore normale ecole engineering degli della delle technion graduate public
autonomous autonoma metropolitan central northern southern eastern western north south east west
""".split())

COUNTRY_ALIASES = {
    "US": ("USA", "United States of America", "America"),
    "GB": ("UK", "Britain", "Great Britain", "England", "Scotland", "Wales"),
    "KR": ("Korea", "Republic of Korea"),
    "CN": ("PRC", "People's Republic of China"),
    "RU": ("Russian Federation",),
    "TR": ("Türkiye", "Turkiye"),
    "CZ": ("Czech Republic",),
    "NL": ("Holland",),
    "IR": ("Islamic Republic of Iran",),
    "VN": ("Viet Nam",),
}


def fold(text: str) -> str:
    """Case-fold, strip diacritics and collapse whitespace."""
    decomposed = unicodedata.normalize("NFKD", text)
    stripped = "".join(ch for ch in decomposed if not unicodedata.combining(ch))
    return " ".join(stripped.casefold().split())


def _country_table() -> Dict[str, str]:
    text = resources.files("blindrank").joinpath("data/regions.csv").read_text(encoding="utf-8")
    return {row["iso2"]: row["country"] for row in csv.DictReader(text.splitlines())}


COUNTRY_NAMES = _country_table()


@dataclass(frozen=True)
class InstitutionProfile:
    """Full (non-anonymized) profile: raw data plus derived metrics."""

    raw: RawInstitutionData
    features: FeatureVector
    zscores: ZScoreReport
    positioning: Mapping[str, Mapping[str, float]]
    published_ranks: Mapping[str, str] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.raw.display_name


def build_profile(raw: RawInstitutionData, benchmarks: Optional[Sequence[TierBenchmark]] = None,
                  published_ranks: Optional[Mapping[str, str]] = None,
                  features: Optional[FeatureVector] = None) -> InstitutionProfile:
    benchmarks = benchmarks if benchmarks is not None else default_benchmarks()
    features = features or compute_features(raw, benchmarks)
    return InstitutionProfile(raw, features, zscore_report(features, benchmarks),
                              tier_positioning(features, benchmarks), dict(published_ranks or {}))


@dataclass(frozen=True)
class AnonymizedProfile:
    opaque_id: str
    payload: Mapping

    def serialize(self) -> str:
        """Exact text handed to estimator backends (fixed key order)."""
        return json.dumps(self.payload, indent=2, ensure_ascii=False, allow_nan=False)

    @property
    def features(self) -> FeatureVector:
        return FeatureVector.from_dict(self.payload["metrics"])


def opaque_id(seed) -> str:
    return f"INST-{random.Random(seed).getrandbits(32):08X}"


def anonymize(profile: InstitutionProfile, seed, strict_fields: bool = False) -> AnonymizedProfile:
    """Replace identifying fields with placeholders; numeric values pass through untouched.

    The id depends on ``seed`` only, never on profile content. With
    ``strict_fields`` the discipline labels become ``[Field k]`` as well.
    """
    raw = profile.raw
    inst_id = opaque_id(seed)
    total = sum(raw.field_distribution.values())
    fields_sorted = sorted(raw.field_distribution.items(), key=lambda kv: (-kv[1], kv[0]))
    field_rows = []
    for k, (name, count) in enumerate(fields_sorted, start=1):
        field_rows.append({
            "field": f"[Field {k}]" if strict_fields else name,
            "works": count,
            "pct": count / total * 100 if total else 0.0,
        })
    years = sorted(set(raw.works_by_year) | set(raw.citations_by_year))
    collab = sorted(raw.collaboration_countries.items(), key=lambda kv: (-kv[1], kv[0]))

    payload = {
        "id": inst_id,
        "country": REDACTED,
        "publishedRankings": None,
        "metrics": profile.features.as_dict(),
        "zScores": [{"metric": e.metric, "value": e.value, "closestTier": e.closest_tier,
                     "z": e.z, "signal": e.signal} for e in profile.zscores.entries],
        "tierPositioning": {m: dict(v) for m, v in profile.positioning.items()},
        "yearlyTrends": [{"year": y, "works": raw.works_by_year.get(y, 0),
                          "citations": raw.citations_by_year.get(y, 0)} for y in years],
        "fieldDistribution": field_rows,
        "citationStats": {"hIndex": raw.h_index, "i10Index": raw.i10_index,
                          "twoYearMeanCitedness": raw.two_year_mean_citedness,
                          "citedByCount": raw.cited_by_count},
        "topWorks": [{"title": f"[Work {k}]", "doi": None, "citations": w.citations, "fwci": w.fwci,
                      "citationPercentile": w.citation_percentile, "tldr": None,
                      "influentialCitations": w.influential_citations}
                     for k, w in enumerate(raw.top_works, start=1)],
        "collaborationCountries": [{"country": f"[Country {k}]", "works": n}
                                   for k, (_, n) in enumerate(collab, start=1)],
        "dataQuality": list(profile.features.flags),
    }
    return AnonymizedProfile(inst_id, payload)


# ---------------------------------------------------------------------------
# Leak verification

@dataclass
class RuleResult:
    passed: bool = True
    offenses: List[Tuple[str, str]] = field(default_factory=list)  # (offending text, path)

    def fail(self, text: str, path: str) -> None:
        self.passed = False
        self.offenses.append((text, path))


@dataclass
class RedactionReport:
    rules: Dict[str, RuleResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rules.values())

    @property
    def leak_count(self) -> int:
        return sum(len(r.offenses) for r in self.rules.values())

    def summary(self) -> str:
        lines = []
        for name, r in self.rules.items():
            status = "pass" if r.passed else "FAIL " + "; ".join(f"{t!r} at {p}" for t, p in r.offenses)
            lines.append(f"{name}: {status}")
        return "\n".join(lines)


def iter_strings(obj, path: str = "$") -> Iterator[Tuple[str, str, bool]]:
    """Yield (path, text, is_key) for every string key and value in a JSON-like tree."""
    if isinstance(obj, Mapping):
        for k, v in obj.items():
            sub = f"{path}.{k}"
            yield sub, str(k), True
            yield from iter_strings(v, sub)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from iter_strings(v, f"{path}[{i}]")
    elif isinstance(obj, str):
        yield path, obj, False


def _word_pattern(term: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(fold(term)) + r"(?!\w)")


def name_terms(name: str) -> List[str]:
    words = re.findall(r"\w+", fold(name))
    terms = [fold(name)]
    terms += [w for w in dict.fromkeys(words) if len(w) >= 4 and w not in GENERIC_NAME_WORDS]
    return terms


def country_terms(code: str) -> List[str]:
    code = (code or "").upper()
    names = []
    if code in COUNTRY_NAMES:
        names.append(COUNTRY_NAMES[code])
    names.extend(COUNTRY_ALIASES.get(code, ()))
    return names


def _ngrams(text: str, n: int = 3) -> set:
    words = re.findall(r"\w+", fold(text))
    return {tuple(words[i:i + n]) for i in range(len(words) - n + 1)}


_DOI_RE = re.compile(r"10\.\d{4,9}/\S+", re.IGNORECASE)


class LeakDetector:
    """Scans text or JSON trees for identifying material of one institution."""

    def __init__(self, raw: RawInstitutionData, extra_names: Sequence[str] = ()):
        self.raw = raw
        self.name_patterns = [(t, _word_pattern(t)) for n in (raw.display_name, *extra_names)
                              for t in name_terms(n)]
        self.country_patterns = [(t, _word_pattern(t)) for t in country_terms(raw.country_code)]
        self.code = (raw.country_code or "").upper()
        self.code_pattern = re.compile(r"(?<![A-Za-z0-9])" + re.escape(self.code) + r"(?![A-Za-z0-9])") \
            if self.code else None
        self.dois = [fold(w.doi) for w in raw.top_works if w.doi]
        self.title_grams = set().union(*(_ngrams(w.title) for w in raw.top_works)) if raw.top_works else set()
        self.tldr_grams = set().union(*(_ngrams(w.tldr) for w in raw.top_works if w.tldr)) \
            if any(w.tldr for w in raw.top_works) else set()
        self.collab_patterns = [(c, _word_pattern(c)) for c in raw.collaboration_countries]

    def scan_text(self, text: str, path: str, report: Dict[str, RuleResult], is_key: bool = False) -> None:
        folded = fold(text)
        for term, pat in self.name_patterns:
            if pat.search(folded):
                report["institution_name"].fail(term, path)
        for term, pat in self.country_patterns:
            if pat.search(folded):
                report["country"].fail(term, path)
        if self.code_pattern is not None and (
                self.code_pattern.search(text) or (not is_key and text.strip().upper() == self.code)):
            report["country"].fail(self.code, path)
        for doi in self.dois:
            if doi in folded:
                report["doi"].fail(doi, path)
        m = _DOI_RE.search(text)
        if m and not any(d in folded for d in self.dois):
            report["doi"].fail(m.group(0), path)
        grams = _ngrams(text)
        hit = grams & self.title_grams
        if hit:
            report["titles"].fail(" ".join(sorted(hit)[0]), path)
        hit = grams & self.tldr_grams
        if hit:
            report["tldr"].fail(" ".join(sorted(hit)[0]), path)
        for term, pat in self.collab_patterns:
            if pat.search(folded):
                report["collaboration_countries"].fail(term, path)

    def new_report(self) -> Dict[str, RuleResult]:
        return {k: RuleResult() for k in ("institution_name", "country", "doi", "titles",
                                          "collaboration_countries", "published_rankings", "tldr",
                                          "numeric_preservation")}

    def scan(self, obj, report: Optional[Dict[str, RuleResult]] = None) -> Dict[str, RuleResult]:
        report = report if report is not None else self.new_report()
        if isinstance(obj, str):
            self.scan_text(obj, "$", report)
        else:
            for path, text, is_key in iter_strings(obj):
                self.scan_text(text, path, report, is_key)
        return report


def _walk(obj, path="$"):
    if isinstance(obj, Mapping):
        for k, v in obj.items():
            yield f"{path}.{k}", k, v
            yield from _walk(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _walk(v, f"{path}[{i}]")


def _same(a, b) -> bool:
    return a == b or (a is None and b is None)


def verify_no_leakage(original: InstitutionProfile, anon: AnonymizedProfile) -> RedactionReport:
    detector = LeakDetector(original.raw)
    report = detector.scan(anon.payload)
    for path, key, value in _walk(anon.payload):
        k = key.lower()
        if ("rank" in k or k in ("tldr", "doi")) and value is not None:
            rule = "published_rankings" if "rank" in k else k if k == "tldr" else "doi"
            report[rule].fail(f"{key}={value!r}", path)

    num = report["numeric_preservation"]
    p = anon.payload
    metrics = p.get("metrics", {})
    for name, value in original.features.as_dict().items():
        if not _same(metrics.get(name, "missing"), value):
            num.fail(name, f"$.metrics.{name}")
    works = p.get("topWorks", [])
    if len(works) != len(original.raw.top_works):
        num.fail("topWorks length", "$.topWorks")
    for i, (w, orig) in enumerate(zip(works, original.raw.top_works)):
        for key, val in (("citations", orig.citations), ("fwci", orig.fwci),
                         ("citationPercentile", orig.citation_percentile),
                         ("influentialCitations", orig.influential_citations)):
            if not _same(w.get(key, "missing"), val):
                num.fail(key, f"$.topWorks[{i}].{key}")
    for row in p.get("yearlyTrends", []):
        y = row.get("year")
        if row.get("works") != original.raw.works_by_year.get(y, 0) or \
                row.get("citations") != original.raw.citations_by_year.get(y, 0):
            num.fail(str(y), "$.yearlyTrends")
    if not ID_PATTERN.match(str(p.get("id", ""))):
        report["institution_name"].fail(str(p.get("id")), "$.id")
    return RedactionReport(report)
