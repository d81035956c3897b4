"""Data acquisition: OpenAlex / Semantic Scholar clients, ranking CSVs, snapshots."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import httpx

from .bibliometrics import WINDOW, RawInstitutionData, TopWork

log = logging.getLogger(__name__)

OPENALEX_BASE_URL = "https://api.openalex.org"
S2_BASE_URL = "https://api.semanticscholar.org/graph/v1"
SYSTEMS = ("QS", "THE", "ARWU")


class IngestionError(Exception):
    pass


class TransientError(IngestionError):
    """Remote failure that persisted through all retries."""


class NotFoundError(IngestionError, KeyError):
    pass


class CorruptSnapshotError(IngestionError):
    pass


class DuplicateEntryError(IngestionError):
    pass


class RateLimiter:
    """Minimum spacing between requests; the one serialization point of a client."""

    def __init__(self, min_interval: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.min_interval = float(min_interval)
        self.clock = clock
        self.sleep = sleep
        self._next = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock()
            if self._next is not None and now < self._next:
                self.sleep(self._next - now)
                now = self.clock()
            self._next = now + self.min_interval


class _ApiClient:
    retries = 3
    backoff_base = 1.0

    def __init__(self, base_url: str, http: Optional[httpx.Client] = None, min_interval: float = 0.1,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep,
                 headers: Optional[Mapping[str, str]] = None):
        self.base_url = base_url.rstrip("/")
        self.http = http or httpx.Client(timeout=30.0)
        self.limiter = RateLimiter(min_interval, clock=clock, sleep=sleep)
        self.sleep = sleep
        self.headers = dict(headers or {})
        self.request_times: List[float] = []

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        url = f"{self.base_url}/{path.lstrip('/')}"
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff_base * 2 ** (attempt - 1))
            self.limiter.acquire()
            self.request_times.append(self.limiter.clock())
            try:
                resp = self.http.request(method, url, headers=self.headers, **kwargs)
            except httpx.TransportError as exc:
                last = exc
                log.warning("%s %s failed (%s), attempt %d", method, url, exc, attempt + 1)
                continue
            if resp.status_code == 404:
                raise NotFoundError(url)
            if resp.status_code == 429 or resp.status_code >= 500:
                last = IngestionError(f"HTTP {resp.status_code}")
                log.warning("%s %s -> %d, attempt %d", method, url, resp.status_code, attempt + 1)
                continue
            resp.raise_for_status()
            return resp
        raise TransientError(f"{method} {url}: {last}")

    def get_json(self, path: str, params: Optional[Mapping] = None):
        return self._request("GET", path, params=params).json()

    def post_json(self, path: str, body) -> object:
        return self._request("POST", path, json=body).json()


def _short_id(openalex_id: str) -> str:
    return openalex_id.rstrip("/").rsplit("/", 1)[-1]


class OpenAlexClient(_ApiClient):
    """Institution-level queries against the OpenAlex REST API.

    Yearly works come from a ``publication_year`` group-by restricted to the
    window; yearly citations come from the institution's ``counts_by_year``.
    """

    def __init__(self, base_url: Optional[str] = None, mailto: Optional[str] = None, **kwargs):
        super().__init__(base_url or os.environ.get("OPENALEX_BASE_URL", OPENALEX_BASE_URL), **kwargs)
        self.mailto = mailto or os.environ.get("OPENALEX_MAILTO")
        key = os.environ.get("OPENALEX_API_KEY")
        self.api_key = key

    def _params(self, **extra) -> dict:
        p = dict(extra)
        if self.mailto:
            p["mailto"] = self.mailto
        if self.api_key:
            p["api_key"] = self.api_key
        return p

    def _works(self, inst: str, window: Tuple[int, int], extra_filter: str = "", **params) -> dict:
        flt = f"authorships.institutions.lineage:{inst},publication_year:{window[0]}-{window[1]}"
        if extra_filter:
            flt += "," + extra_filter
        return self.get_json("works", self._params(filter=flt, **params))

    def _count(self, inst: str, window: Tuple[int, int], extra_filter: str) -> int:
        return int(self._works(inst, window, extra_filter, **{"per-page": 1})["meta"]["count"])

    def fetch_institution(self, institution_id: str, window: Tuple[int, int] = WINDOW) -> RawInstitutionData:
        inst = _short_id(institution_id)
        profile = self.get_json(f"institutions/{inst}", self._params())
        flags = []
        years = range(window[0], window[1] + 1)

        by_year = self._works(inst, window, group_by="publication_year")["group_by"]
        works_by_year = {int(g["key"]): int(g["count"]) for g in by_year if int(g["key"]) in years}
        citations_by_year = {int(c["year"]): int(c.get("cited_by_count", 0))
                             for c in profile.get("counts_by_year", []) if int(c["year"]) in years}
        if not works_by_year:
            flags.append("missing_yearly_works")

        fields_ = self._works(inst, window, group_by="primary_topic.field.id")["group_by"]
        field_distribution = {g["key_display_name"]: int(g["count"]) for g in fields_
                              if g.get("key_display_name") and g["key"] != "unknown"}

        country = profile.get("country_code") or ""
        countries = self._works(inst, window, group_by="authorships.countries")["group_by"]
        collab = {}
        for g in countries:
            code = _short_id(str(g["key"]))
            if code.upper() != country.upper() and g.get("key_display_name"):
                collab[g["key_display_name"]] = int(g["count"])
        collab = dict(list(collab.items())[:10])

        top = self._works(inst, window, sort="cited_by_count:desc", **{"per-page": 10})["results"]
        top_works = []
        for w in top:
            pct = w.get("citation_normalized_percentile") or {}
            top_works.append(TopWork(
                title=w.get("title") or w.get("display_name") or "",
                doi=(w.get("doi") or "").replace("https://doi.org/", "") or None,
                citations=int(w.get("cited_by_count", 0)),
                fwci=w.get("fwci"),
                citation_percentile=pct.get("value"),
            ))

        stats = profile.get("summary_stats", {})
        works_total = sum(works_by_year.values())
        # field counts come from a separate group-by and may drift from the yearly total
        fsum = sum(field_distribution.values())
        if fsum > works_total and fsum > 0:
            scale = works_total / fsum
            field_distribution = {k: int(v * scale) for k, v in field_distribution.items()}
            flags.append("field_counts_rescaled")

        return RawInstitutionData(
            institution_id=inst,
            display_name=profile.get("display_name", ""),
            country_code=country,
            works_by_year=works_by_year,
            citations_by_year=citations_by_year,
            field_distribution=field_distribution,
            intl_collab_count=min(works_total, self._count(inst, window, "countries_distinct_count:>1")),
            open_access_count=min(works_total, self._count(inst, window, "is_oa:true")),
            top_works=tuple(sorted(top_works, key=lambda w: -w.citations)),
            excellence_count=min(works_total, self._count(
                inst, window, "citation_normalized_percentile.is_in_top_10_percent:true")),
            h_index=int(stats.get("h_index", 0)),
            i10_index=int(stats.get("i10_index", 0)),
            two_year_mean_citedness=float(stats.get("2yr_mean_citedness", 0.0)),
            collaboration_countries=collab,
            flags=tuple(flags),
        )


@dataclass(frozen=True)
class EnrichmentRecord:
    doi: str
    total_citations: int
    influential_citations: int

    def __post_init__(self):
        if not 0 <= self.influential_citations <= self.total_citations:
            raise ValueError(f"{self.doi}: influential citations exceed total")

    @property
    def influential_ratio(self) -> float:
        return self.influential_citations / self.total_citations if self.total_citations else 0.0


class EnrichmentResult(NamedTuple):
    records: List[EnrichmentRecord]
    unresolved: List[str]


class SemanticScholarClient(_ApiClient):
    def __init__(self, base_url: Optional[str] = None, api_key: Optional[str] = None,
                 batch_limit: int = 10, **kwargs):
        key = api_key or os.environ.get("S2_API_KEY")
        headers = {"x-api-key": key} if key else {}
        super().__init__(base_url or os.environ.get("S2_BASE_URL", S2_BASE_URL), headers=headers, **kwargs)
        self.batch_limit = batch_limit

    def fetch_enrichment(self, dois: Sequence[str]) -> EnrichmentResult:
        if not dois:
            return EnrichmentResult([], [])
        if len(dois) > self.batch_limit:
            raise ValueError(f"batch of {len(dois)} exceeds limit {self.batch_limit}")
        resp = self._request("POST", "paper/batch",
                             params={"fields": "citationCount,influentialCitationCount,externalIds"},
                             json={"ids": [f"DOI:{d}" for d in dois]})
        records, unresolved = [], []
        for doi, paper in zip(dois, resp.json()):
            if not paper:
                unresolved.append(doi)
                continue
            total = int(paper.get("citationCount") or 0)
            infl = min(total, int(paper.get("influentialCitationCount") or 0))
            records.append(EnrichmentRecord(doi, total, infl))
        if unresolved:
            log.info("%d DOIs unresolved by Semantic Scholar", len(unresolved))
        return EnrichmentResult(records, unresolved)


def enrich(raw: RawInstitutionData, s2: SemanticScholarClient) -> RawInstitutionData:
    """Attach influential-citation counts to the top works."""
    dois = [w.doi for w in raw.top_works if w.doi][: s2.batch_limit]
    result = s2.fetch_enrichment(dois)
    by_doi = {r.doi: r for r in result.records}
    works = []
    for w in raw.top_works:
        r = by_doi.get(w.doi) if w.doi else None
        works.append(TopWork(w.title, w.doi, w.citations, w.fwci, w.citation_percentile, w.tldr,
                             r.influential_citations if r else None))
    flags = raw.flags + (("unresolved_dois",) if result.unresolved else ())
    d = raw.to_dict()
    d["top_works"] = [asdict(w) for w in works]
    d["flags"] = list(dict.fromkeys(flags))
    return RawInstitutionData.from_dict(d)


# ---------------------------------------------------------------------------
# Ground-truth rankings

_BAND_RE = re.compile(r"^\s*=?\s*(\d+)\s*(?:[-–—]\s*(\d+)|(\+))?\s*$")


@dataclass(frozen=True)
class RankValue:
    lo: int
    hi: int
    open_ended: bool = False

    def __post_init__(self):
        if self.lo < 1 or self.hi < self.lo:
            raise ValueError(f"invalid rank [{self.lo}, {self.hi}]")

    @property
    def is_band(self) -> bool:
        return self.hi != self.lo or self.open_ended

    @property
    def midpoint(self) -> float:
        return (self.lo + self.hi) / 2

    def label(self) -> str:
        if self.open_ended:
            return f"{self.lo}+"
        return str(self.lo) if self.lo == self.hi else f"{self.lo}–{self.hi}"

    @classmethod
    def parse(cls, text: str, open_hi: Optional[int] = None) -> "RankValue":
        m = _BAND_RE.match(str(text))
        if not m:
            raise ValueError(f"unparseable rank {text!r}")
        lo = int(m.group(1))
        if m.group(2):
            return cls(lo, int(m.group(2)))
        if m.group(3):
            return cls(lo, max(lo, open_hi or lo), open_ended=True)
        return cls(lo, lo)

    @classmethod
    def point(cls, r: int) -> "RankValue":
        return cls(int(r), int(r))


@dataclass(frozen=True)
class GroundTruthEntry:
    name: str
    country: str
    rank: RankValue
    sub_scores: Mapping[str, float] = field(default_factory=dict)


@dataclass
class GroundTruthTable:
    system: str
    edition: Optional[int]
    entries: List[GroundTruthEntry]
    errors: List[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            key = " ".join(e.name.casefold().split())
            if key in seen:
                raise DuplicateEntryError(f"{self.system}: duplicate university {e.name!r}")
            seen.add(key)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, GroundTruthTable):
            return NotImplemented
        return (self.system, self.edition, self.entries) == (other.system, other.edition, other.entries)


def _num(x: str) -> Optional[float]:
    x = x.strip()
    if not x or x in {"-", "n/a", "NA"}:
        return None
    # "45.1–50.0" style score bands -> midpoint
    m = re.match(r"^([\d.]+)\s*[-–]\s*([\d.]+)$", x)
    if m:
        return (float(m.group(1)) + float(m.group(2))) / 2
    return float(x)


def load_rankings(path: Union[str, Path], system: str, edition: Optional[int] = None) -> GroundTruthTable:
    """Read a ranking CSV: ``name, country, rank, <sub-score columns...>``.

    Malformed rows are reported in ``table.errors`` and skipped. Open-ended
    bands such as ``1501+`` close at the table size.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = [h.strip() for h in header]
    if [c.lower() for c in cols[:3]] != ["name", "country", "rank"]:
        raise IngestionError(f"{path}: expected header name,country,rank,...")
    score_cols = cols[3:]
    n_rows = sum(1 for r in rows if any(c.strip() for c in r))
    entries, errors = [], []
    for lineno, row in enumerate(rows, start=2):
        if not any(c.strip() for c in row):
            continue
        try:
            if len(row) < 3:
                raise ValueError("too few columns")
            rank = RankValue.parse(row[2], open_hi=n_rows)
            scores = {}
            for col, val in zip(score_cols, row[3:]):
                v = _num(val)
                if v is not None:
                    scores[col] = v
            entries.append(GroundTruthEntry(row[0].strip(), row[1].strip(), rank, scores))
        except ValueError as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        log.warning("%s: %d malformed rows skipped", path, len(errors))
    return GroundTruthTable(system, edition, entries, errors)


def save_rankings(table: GroundTruthTable, path: Union[str, Path]) -> None:
    score_cols: List[str] = []
    for e in table.entries:
        for k in e.sub_scores:
            if k not in score_cols:
                score_cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "country", "rank"] + score_cols)
        for e in table.entries:
            w.writerow([e.name, e.country, e.rank.label()]
                       + [repr(e.sub_scores[c]) if c in e.sub_scores else "" for c in score_cols])


# ---------------------------------------------------------------------------
# Snapshots

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def _safe_name(inst_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", inst_id)


@dataclass(frozen=True)
class SnapshotManifest:
    snapshot_date: str
    source: str
    entries: Tuple[Tuple[str, str, str], ...]  # (institution id, relative path, sha256)

    def to_dict(self) -> dict:
        return {"format": "blindrank-snapshot", "version": 1, "snapshot_date": self.snapshot_date,
                "source": self.source,
                "entries": [{"institution_id": i, "path": p, "sha256": h} for i, p, h in self.entries]}


def snapshot_write(directory: Union[str, Path], records: Iterable[RawInstitutionData],
                   source: str = "openalex", snapshot_date: Optional[str] = None) -> SnapshotManifest:
    root = Path(directory)
    (root / "records").mkdir(parents=True, exist_ok=True)
    entries = []
    for raw in records:
        rel = f"records/{_safe_name(raw.institution_id)}.json"
        blob = canonical_json(raw.to_dict())
        (root / rel).write_bytes(blob)
        entries.append((raw.institution_id, rel, hashlib.sha256(blob).hexdigest()))
    manifest = SnapshotManifest(snapshot_date or date.today().isoformat(), source, tuple(entries))
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def read_manifest(directory: Union[str, Path]) -> SnapshotManifest:
    doc = json.loads((Path(directory) / "manifest.json").read_text())
    if doc.get("format") != "blindrank-snapshot":
        raise CorruptSnapshotError("not a snapshot manifest")
    return SnapshotManifest(doc["snapshot_date"], doc["source"],
                            tuple((e["institution_id"], e["path"], e["sha256"]) for e in doc["entries"]))


def _read_verified(root: Path, rel: str, digest: str) -> RawInstitutionData:
    blob = (root / rel).read_bytes()
    if hashlib.sha256(blob).hexdigest() != digest:
        raise CorruptSnapshotError(f"hash mismatch for {rel}")
    return RawInstitutionData.from_dict(json.loads(blob))


def snapshot_read(directory: Union[str, Path]) -> Dict[str, RawInstitutionData]:
    root = Path(directory)
    manifest = read_manifest(root)
    return {inst: _read_verified(root, rel, digest) for inst, rel, digest in manifest.entries}


class SnapshotSource:
    """Offline stand-in for :class:`OpenAlexClient` backed by a snapshot directory."""

    def __init__(self, directory: Union[str, Path]):
        self.root = Path(directory)
        self.manifest = read_manifest(self.root)
        self._index = {inst: (rel, digest) for inst, rel, digest in self.manifest.entries}

    def __contains__(self, institution_id: str) -> bool:
        return institution_id in self._index

    def ids(self) -> List[str]:
        return list(self._index)

    def fetch_institution(self, institution_id: str, window: Tuple[int, int] = WINDOW) -> RawInstitutionData:
        inst = _short_id(institution_id)
        if inst not in self._index:
            raise NotFoundError(inst)
        rel, digest = self._index[inst]
        return _read_verified(self.root, rel, digest)

    def by_name(self) -> Dict[str, RawInstitutionData]:
        return {raw.display_name: raw for raw in (self.fetch_institution(i) for i in self._index)}
