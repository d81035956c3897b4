"""Double-blind evaluation harness: protocol, batches, failure tags, reports."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import evalmetrics as em
from . import stats
from .anonymization import country_terms, fold
from .backends import Backend, BackendReply, BackendRequest, BackendUnavailable
from .bibliometrics import TierBenchmark, benchmark_tier_for_rank, default_benchmarks, metrics_below_tier
from .estimates import EstimateRange
from .evalmetrics import PredictionRecord
from .pipeline import PipelineResult, run_pipeline
from .ranking_store import RankingStore, UnknownUniversityError, hide, verify_hidden
from .testset import REGIONS, TIERS, TestSetMember

log = logging.getLogger(__name__)

LOG_NAME = "run_log.jsonl"
META_NAME = "run_meta.json"
FAILURE_MODES = ("F1", "F2", "F3", "F4", "F5", "F6")
SCANNED_STAGES = ("stage1", "stage2")
SCANNED_ROLES = ("system", "user", "tool")
P10_Z = 1.2816  # one-sided normal quantile for the 10th/90th percentile

SUCCESS, FAILURE, VIOLATION = "success", "failure", "protocol_violation"


class ProtocolViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class FailureTag:
    mode: str
    source: str = "heuristic"
    evidence: str = ""

    def __post_init__(self):
        if self.mode not in FAILURE_MODES:
            raise ValueError(f"unknown failure mode {self.mode!r}")
        if self.source not in ("heuristic", "manual"):
            raise ValueError("source must be heuristic or manual")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "source": self.source, "evidence": self.evidence}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FailureTag":
        return cls(d["mode"], d.get("source", "heuristic"), d.get("evidence", ""))


def derive_seed(run_seed: int, name: str) -> int:
    """Per-member seed from the run seed and the member name (order independent)."""
    return int.from_bytes(hashlib.sha256(f"{run_seed}|{name}".encode()).digest()[:4], "big")


# ---------------------------------------------------------------------------
# Prompt capture

class CapturingBackend(Backend):
    """Wraps a backend, logging each call as an event and keeping a copy of
    every payload that went out."""

    def __init__(self, inner: Backend, events: List[str]):
        self.inner = inner
        self.events = events
        self.captures: List[Tuple[str, Optional[str], List[dict]]] = []
        self.supports_tools = inner.supports_tools
        self.deterministic = inner.deterministic
        self.name = inner.name
        self._lock = threading.Lock()

    def describe(self) -> dict:
        return self.inner.describe()

    def complete(self, request: BackendRequest) -> BackendReply:
        with self._lock:
            self.events.append(f"backend_call:{request.stage}")
            self.captures.append((request.stage, request.system, copy.deepcopy(request.messages)))
        return self.inner.complete(request)


def _rank_pattern(rank: float) -> re.Pattern:
    num = str(int(rank)) if float(rank).is_integer() else repr(float(rank))
    num = re.escape(num) + (r"(?:\.0+)?" if float(rank).is_integer() else "")
    # rankMin/rankMax are the backend's own estimates and rankValue labels a named peer's row
    return re.compile(r"(?:rank(?!min|max|value)\w*\W{0,4}|#\s*)" + num + r"(?![\d.])", re.IGNORECASE)


def scan_captures(captures, name: str, country_code: str, actual_ranks: Sequence[float] = ()) -> List[str]:
    """Occurrences of the target's name, country or actual rank in the
    harness-authored messages of stages 1-2.

    Ranks are matched in rank context (``"rank": 355``, ``ranked 355``,
    ``#355``) so that unrelated counts in the metrics do not trip the scan.
    Estimate fields and the rank column of peer samples are not rank context.
    """
    name_re = re.compile(r"\b" + re.escape(fold(name)) + r"\b")
    country_res = []
    for term in country_terms(country_code) + ([country_code.upper()] if country_code else []):
        if term == country_code:
            # alphanumeric boundaries so hex ids like INST-3CA0... do not count
            country_res.append((re.compile(r"(?<![A-Za-z0-9])" + re.escape(term) + r"(?![A-Za-z0-9])"), False))
        else:
            country_res.append((re.compile(r"\b" + re.escape(fold(term)) + r"\b"), True))
    rank_res = [_rank_pattern(r) for r in actual_ranks]
    hits = []
    for stage, system, messages in captures:
        if stage not in SCANNED_STAGES:
            continue
        for i, m in enumerate(messages):
            if m.get("role") not in SCANNED_ROLES:
                continue
            text = m.get("content") or ""
            folded = fold(text)
            where = f"{stage}:{system or '-'}:msg{i}:{m['role']}"
            if name_re.search(folded):
                hits.append(f"{where}: name")
            for rx, on_folded in country_res:
                if rx.search(folded if on_folded else text):
                    hits.append(f"{where}: country")
                    break
            for rx in rank_res:
                if rx.search(text):
                    hits.append(f"{where}: rank")
                    break
    return hits


# ---------------------------------------------------------------------------
# One evaluation

@dataclass
class Outcome:
    name: str
    status: str
    stage: Optional[str] = None
    error: Optional[str] = None
    record: Optional[PredictionRecord] = None
    events: List[str] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    leaks: List[str] = field(default_factory=list)
    usage: Dict[str, int] = field(default_factory=dict)
    result: Optional[PipelineResult] = None

    def to_dict(self) -> dict:
        return {"type": "outcome", "name": self.name, "status": self.status, "stage": self.stage,
                "error": self.error, "record": self.record.to_dict() if self.record else None,
                "events": canonical_events(self.events), "flags": list(self.flags), "leaks": list(self.leaks),
                "usage": dict(sorted(self.usage.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Outcome":
        rec = PredictionRecord.from_dict(d["record"]) if d.get("record") else None
        return cls(d["name"], d["status"], d.get("stage"), d.get("error"), rec, list(d.get("events", [])),
                   list(d.get("flags", [])), list(d.get("leaks", [])), dict(d.get("usage", {})))


def canonical_events(events: Sequence[str]) -> List[str]:
    """Collapse each run of backend calls into per-stage counts, which do not
    depend on thread interleaving."""
    out: List[str] = []
    run: Dict[str, int] = {}

    def flush():
        for stage in sorted(run):
            out.append(f"{stage} x{run[stage]}")
        run.clear()

    for e in events:
        if e.startswith("backend_call"):
            run[e] = run.get(e, 0) + 1
        else:
            flush()
            out.append(e)
    flush()
    return out


def check_protocol(events: Sequence[str]) -> Optional[str]:
    """Why the event order breaks the protocol, or None if it holds."""
    calls = [i for i, e in enumerate(events) if e.startswith("backend_call")]
    if not calls:
        return None
    first = calls[0]
    for needed in ("verify_hidden:pass", "verify_no_leakage:pass"):
        if needed not in events[:first]:
            return f"backend called before {needed}"
    if "read_actual" in events and events.index("read_actual") < calls[-1]:
        return "actual rank read before the pipeline finished"
    return None


def evaluate_one(member: Union[TestSetMember, str], store: RankingStore, backend: Backend, seed: int = 0,
                 system: str = "THE", with_report: bool = False, parallel: bool = True) -> Outcome:
    """Hide, verify, anonymize, estimate, release, then read the actual rank."""
    name = member if isinstance(member, str) else member.name
    if name not in store:
        raise UnknownUniversityError(name)
    name = store.canonical(name)
    events: List[str] = []
    view = hide(store, name)
    events.append("hide")
    if not verify_hidden(view, name):
        events.append("verify_hidden:fail")
        return Outcome(name, VIOLATION, "hide", "target visible through the store view", events=events)
    events.append("verify_hidden:pass")
    capturing = CapturingBackend(backend, events)
    result = run_pipeline(name, store, capturing, seed, view=view, with_report=with_report,
                          parallel=parallel, events=events)
    leaked_tools = list(view.leakage_attempts)
    del view
    events.append("release")
    actual = store.rank_of(name, system)
    events.append("read_actual")
    raw = store.raw_data(name)
    leaks = scan_captures(capturing.captures, name, raw.country_code if raw else "",
                          [r.midpoint for r in store.ranks_of(name).values()])
    out = Outcome(name, SUCCESS, events=events, flags=list(result.flags), leaks=leaks, usage=dict(result.usage),
                  result=result)
    if leaked_tools:
        out.flags.append(f"refused_target_requests:{len(leaked_tools)}")
    bad = check_protocol(events)
    if bad or leaks:
        out.status, out.stage, out.error = VIOLATION, "protocol", bad or "; ".join(leaks)
        return out
    if not result.ok:
        out.status, out.stage, out.error = FAILURE, result.failed_stage, result.error
        return out
    if actual is None or system not in result.traces:
        out.status, out.stage, out.error = FAILURE, "input", f"no {system} rank or estimate"
        return out
    tier = member.tier if isinstance(member, TestSetMember) else em.assign_tier(actual.midpoint)
    region = member.region if isinstance(member, TestSetMember) else "Mixed"
    out.record = PredictionRecord(
        name, system, tier, region, result.traces[system].final, actual.midpoint,
        result.initial[system], (actual.lo, actual.hi) if actual.is_band else None,
        result.anon.features.as_dict(), [], tuple(result.traces[system].flags))
    return out


# ---------------------------------------------------------------------------
# Batches

@dataclass
class EvaluationRun:
    run_id: str
    run_dir: Path
    header: dict
    outcomes: List[Outcome] = field(default_factory=list)
    halted: bool = False
    complete: bool = False

    @property
    def records(self) -> List[PredictionRecord]:
        return [o.record for o in self.outcomes if o.status == SUCCESS and o.record is not None]

    @property
    def attempts(self) -> int:
        return len(self.outcomes)

    @property
    def failures(self) -> List[Outcome]:
        return [o for o in self.outcomes if o.status != SUCCESS]

    @property
    def violations(self) -> List[Outcome]:
        return [o for o in self.outcomes if o.status == VIOLATION]

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / self.attempts if self.attempts else 0.0

    def summary_line(self) -> dict:
        return {"type": "summary", "attempts": self.attempts, "successes": len(self.records),
                "failures": len(self.failures), "protocolViolations": len(self.violations),
                "failureRate": round(self.failure_rate, 6)}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def testset_digest(testset: Sequence[TestSetMember]) -> str:
    h = hashlib.sha256()
    for m in testset:
        h.update(_dump(dataclasses.asdict(m)).encode())
    return h.hexdigest()[:16]


def _read_log(path: Path) -> Tuple[Optional[dict], List[dict], Optional[dict]]:
    """Header, outcome lines and summary. A torn last line is dropped and the file trimmed."""
    if not path.exists():
        return None, [], None
    data = path.read_bytes()
    good_end = data.rfind(b"\n") + 1
    if good_end < len(data):
        log.warning("dropping torn trailing line in %s", path)
        with open(path, "r+b") as fh:
            fh.truncate(good_end)
        data = data[:good_end]
    header, lines, summary = None, [], None
    for raw in data.decode("utf-8").splitlines():
        if not raw.strip():
            continue
        d = json.loads(raw)
        if d["type"] == "header":
            header = d
        elif d["type"] == "outcome":
            lines.append(d)
        elif d["type"] == "summary":
            summary = d
    return header, lines, summary


def load_run(run_dir: Union[str, Path]) -> EvaluationRun:
    run_dir = Path(run_dir)
    header, lines, summary = _read_log(run_dir / LOG_NAME)
    if header is None:
        raise FileNotFoundError(f"no run log in {run_dir}")
    run = EvaluationRun(header["runId"], run_dir, header, [Outcome.from_dict(d) for d in lines])
    run.complete = summary is not None
    return run


def evaluate_batch(testset: Sequence[TestSetMember], store: RankingStore, backend: Backend,
                   run_dir: Union[str, Path], concurrency: int = 3, delay_ms: float = 2000, seed: int = 0,
                   system: str = "THE", with_report: bool = False, run_id: Optional[str] = None,
                   sleep=time.sleep, max_members: Optional[int] = None) -> EvaluationRun:
    """Evaluate a test set in batches of ``concurrency`` with ``delay_ms`` between batches.

    Outcomes are appended to ``run_dir/run_log.jsonl`` in test-set order as
    each batch finishes. Re-running on the same directory resumes: members
    already logged are skipped. ``max_members`` stops early (used to simulate
    an interrupted run).
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LOG_NAME
    header = {"type": "header", "runId": run_id or run_dir.name, "testset": testset_digest(testset),
              "size": len(testset), "backend": backend.describe(), "seed": seed, "system": system,
              "systemSize": store.system_size(system),
              "concurrency": concurrency, "delayMs": delay_ms, "withReport": with_report}
    old_header, old_lines, old_summary = _read_log(path)
    if old_header is not None:
        keep = ("testset", "seed", "system", "backend")
        if any(old_header.get(k) != header[k] for k in keep):
            raise ValueError("existing run log belongs to a different run configuration")
        header = old_header
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_dump(header) + "\n")
    run = EvaluationRun(header["runId"], run_dir, header, [Outcome.from_dict(d) for d in old_lines])
    if old_summary is not None:
        run.complete = True
        return run

    meta = {"started": datetime.now(timezone.utc).isoformat(), "resumedFrom": len(old_lines)}
    t0 = time.perf_counter()
    done = {o.name for o in run.outcomes}
    todo = [m for m in testset if m.name not in done]
    if max_members is not None:
        todo = todo[:max_members]
    lock = threading.Lock()

    def job(m: TestSetMember) -> Outcome:
        try:
            return evaluate_one(m, store, backend, derive_seed(seed, m.name), system, with_report)
        except UnknownUniversityError:
            return Outcome(m.name, FAILURE, "input", "university not in ranking store")

    pool = ThreadPoolExecutor(concurrency) if concurrency > 1 else None
    try:
        for start in range(0, len(todo), concurrency):
            if start:
                sleep(delay_ms / 1000)
            batch = todo[start:start + concurrency]
            try:
                outs = list(pool.map(job, batch)) if pool else [job(m) for m in batch]
            except BackendUnavailable as exc:
                log.error("backend unavailable, halting run: %s", exc)
                run.halted = True
                break
            with lock, open(path, "a", encoding="utf-8") as fh:
                for o in outs:
                    fh.write(_dump(o.to_dict()) + "\n")
            run.outcomes += outs
    finally:
        if pool:
            pool.shutdown()
    finished = not run.halted and len(run.outcomes) == len(testset)
    if finished:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(_dump(run.summary_line()) + "\n")
        run.complete = True
    meta.update({"ended": datetime.now(timezone.utc).isoformat(), "seconds": time.perf_counter() - t0,
                 "halted": run.halted, "complete": run.complete})
    (run_dir / META_NAME).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return run


# ---------------------------------------------------------------------------
# Failure tags

def _tier_bench(benchmarks: Sequence[TierBenchmark], rank: float) -> Optional[TierBenchmark]:
    label = benchmark_tier_for_rank(rank)
    return next((b for b in benchmarks if b.tier == label), None)


def heuristic_tags(rec: PredictionRecord, benchmarks: Sequence[TierBenchmark]) -> List[FailureTag]:
    tags = []
    if rec.initial is not None and rec.ae > rec.initial_ae + 100:
        tags.append(FailureTag("F5", evidence=f"calibrated AE {rec.ae:.1f} vs initial AE {rec.initial_ae:.1f}"))
    feats = rec.features
    bench = _tier_bench(benchmarks, rec.actual)
    if feats is not None and bench is not None:
        from .bibliometrics import FeatureVector
        fv = FeatureVector.from_dict(feats)
        low = metrics_below_tier(fv, bench, 3.0)
        if len(low) >= 2:
            tags.append(FailureTag("F6", evidence=f"{', '.join(low)} >3 SD below {bench.tier} mean"))
        wc, ex = bench.metrics.get("worksCount"), bench.metrics.get("researchExcellencePct")
        if wc is not None and ex is not None and feats.get("worksCount") is not None \
                and feats.get("researchExcellencePct") is not None:
            if feats["worksCount"] < wc.mean - P10_Z * wc.sd and \
                    feats["researchExcellencePct"] > ex.mean + P10_Z * ex.sd:
                tags.append(FailureTag("F3", evidence="small output with high excellence share"))
    return tags


def tag_failures(records: Sequence[PredictionRecord], benchmarks: Optional[Sequence[TierBenchmark]] = None,
                 manual: Optional[Mapping[str, Sequence[FailureTag]]] = None) -> List[PredictionRecord]:
    """Copies of ``records`` with tags. Manual tags for a name replace its heuristic ones."""
    benchmarks = benchmarks if benchmarks is not None else default_benchmarks()
    manual = {fold(k): list(v) for k, v in (manual or {}).items()}
    out = []
    for r in records:
        tags = manual.get(fold(r.name))
        if tags is None:
            tags = heuristic_tags(r, benchmarks)
        out.append(dataclasses.replace(r, tags=list(tags)))
    return out


# ---------------------------------------------------------------------------
# Summaries

@dataclass(frozen=True)
class CalibrationImpact:
    improved: int
    worsened: int
    unchanged: int

    @property
    def n(self) -> int:
        return self.improved + self.worsened + self.unchanged


@dataclass
class RunSummary:
    calibrated: em.MetricsSummary
    initial: Optional[em.MetricsSummary]
    impact: Optional[CalibrationImpact]
    tests: Dict[str, stats.TestResult]
    attempts: int
    failures: int
    system_size: int
    records: List[PredictionRecord]


def calibration_impact(records: Sequence[PredictionRecord]) -> CalibrationImpact:
    imp = wor = same = 0
    for r in records:
        if r.initial_ae is None or r.ae == r.initial_ae:
            same += 1
        elif r.ae < r.initial_ae:
            imp += 1
        else:
            wor += 1
    return CalibrationImpact(imp, wor, same)


def summarize_records(records: Sequence[PredictionRecord], system_size: int, hit_k: int = 50,
                      attempts: Optional[int] = None) -> RunSummary:
    if not records:
        raise ValueError("no successful evaluations to summarize")
    cal = em.summarize(records, system_size)
    have_initial = all(r.initial is not None for r in records)
    ini = em.summarize(records, system_size, "initial") if have_initial else None
    tests: Dict[str, stats.TestResult] = {}
    if have_initial:
        try:
            tests["wilcoxon"] = stats.wilcoxon_signed_rank([r.initial_ae for r in records], [r.ae for r in records])
        except ValueError as exc:
            log.info("wilcoxon skipped: %s", exc)
        tests["mcnemar"] = stats.mcnemar([r.initial_ae <= hit_k for r in records], [r.hit(hit_k) for r in records])
    groups = [[r.ae for r in records if r.tier == t] for t in TIERS]
    groups = [g for g in groups if g]
    if len(groups) >= 2:
        tests["kruskal"] = stats.kruskal_wallis(groups)
    n = len(records)
    return RunSummary(cal, ini, calibration_impact(records) if have_initial else None, tests,
                      attempts if attempts is not None else n, (attempts or n) - n, system_size, list(records))


def summarize_run(run: EvaluationRun, store: Optional[RankingStore] = None, system_size: Optional[int] = None,
                  hit_k: int = 50) -> RunSummary:
    if system_size is None:
        if store is None and not run.header.get("systemSize"):
            raise ValueError("need the store or an explicit system size")
        system_size = run.header.get("systemSize") or store.system_size(run.header["system"])
    return summarize_records(run.records, system_size, hit_k, run.attempts)


# ---------------------------------------------------------------------------
# Export

RECORD_COLUMNS = ("name", "system", "tier", "region", "initial_min", "initial_max", "calibrated_min",
                  "calibrated_max", "actual", "band_lo", "band_hi", "midpoint", "ae", "ae_rounded",
                  "signed_error", "width", "tags")


def write_records_csv(records: Sequence[PredictionRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            band = r.actual_band or ("", "")
            w.writerow([r.name, r.system, r.tier, r.region,
                        repr(r.initial.rank_min) if r.initial else "", repr(r.initial.rank_max) if r.initial else "",
                        repr(r.calibrated.rank_min), repr(r.calibrated.rank_max), repr(r.actual), band[0], band[1],
                        repr(r.midpoint), repr(r.ae), r.ae_rounded, repr(r.signed_error), repr(r.width),
                        ";".join(f"{t.mode}:{t.source}" for t in r.tags)])


def read_records_csv(path: Union[str, Path]) -> List[PredictionRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            initial = None
            if row["initial_min"]:
                initial = EstimateRange(float(row["initial_min"]), float(row["initial_max"]))
            band = (int(row["band_lo"]), int(row["band_hi"])) if row["band_lo"] else None
            tags = [FailureTag(*t.split(":")) for t in row["tags"].split(";") if t]
            out.append(PredictionRecord(row["name"], row["system"], row["tier"], row["region"],
                                        EstimateRange(float(row["calibrated_min"]), float(row["calibrated_max"])),
                                        float(row["actual"]), initial, band, None, tags))
    return out


def _f(v, d=1) -> str:
    return "" if v is None else f"{v:.{d}f}"


def per_tier_rows(summary: RunSummary) -> List[dict]:
    rows = []
    for t in TIERS:
        s = summary.calibrated.per_tier.get(t)
        if s is None:
            rows.append({"tier": t, "n": 0, "mae": "", "median_ae": "", "hit50": "", "hit100": "",
                         "coverage": "", "signed_error": ""})
            continue
        rows.append({"tier": t, "n": s.n, "mae": _f(s.mae), "median_ae": _f(s.median_ae),
                     "hit50": em.fmt_pct(s.hits[50].pct), "hit100": em.fmt_pct(s.hits[100].pct),
                     "coverage": em.fmt_pct(s.coverage.coverage_pct), "signed_error": f"{s.signed_error:+.1f}"})
    return rows


def heatmap_rows(records: Sequence[PredictionRecord]) -> List[dict]:
    """Tier x region MAE; cells with fewer than 5 records are starred."""
    rows = []
    for t in TIERS:
        for reg in REGIONS:
            cell = [r.ae for r in records if r.tier == t and r.region == reg]
            rows.append({"tier": t, "region": reg, "n": len(cell),
                         "mae": _f(float(np.mean(cell))) if cell else "",
                         "marker": "*" if len(cell) < 5 else ""})
    return rows


def boxplot_rows(records: Sequence[PredictionRecord]) -> List[dict]:
    rows = []
    for t in TIERS:
        ae = np.array([r.ae for r in records if r.tier == t])
        if len(ae) == 0:
            rows.append({"tier": t, "n": 0, "min": "", "q1": "", "median": "", "q3": "", "max": ""})
            continue
        q = np.percentile(ae, [0, 25, 50, 75, 100])
        rows.append({"tier": t, "n": len(ae), **{k: _f(v) for k, v in zip(("min", "q1", "median", "q3", "max"), q)}})
    return rows


def hitrate_rows(records: Sequence[PredictionRecord]) -> List[dict]:
    rows = []
    for t in TIERS + ("All",):
        sub = records if t == "All" else [r for r in records if r.tier == t]
        for k in em.HIT_KS:
            h = em.hit_rate(sub, k)
            rows.append({"tier": t, "k": k, "count": h.count, "n": h.n, "pct": em.fmt_pct(h.pct) if h.n else ""})
    return rows


def _write_csv(path: Path, rows: Sequence[dict]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return path


def _table(rows: Sequence[Sequence[str]], header: Sequence[str]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(cells[0]), fmt(["-" * w for w in widths])] + [fmt(r) for r in cells[1:]]) + "\n"


def impact_rows(summary: RunSummary) -> List[Tuple[str, str, str]]:
    ini, cal = summary.initial, summary.calibrated
    if ini is None:
        return []
    return [("MAE", _f(ini.mae), _f(cal.mae)), ("Median AE", _f(ini.median_ae), _f(cal.median_ae)),
            ("Hit Rate @50", f"{em.fmt_pct(ini.hits[50].pct)}%", f"{em.fmt_pct(cal.hits[50].pct)}%"),
            ("Hit Rate @100", f"{em.fmt_pct(ini.hits[100].pct)}%", f"{em.fmt_pct(cal.hits[100].pct)}%"),
            ("Spearman's rho", _f(ini.spearman, 3), _f(cal.spearman, 3))]


def emit_report(summary: RunSummary, out_dir: Union[str, Path], fmt: str = "table") -> List[Path]:
    """Write tables (``fmt="table"``) or CSV tables and figure data (``fmt="csv"``)."""
    if fmt not in ("table", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    cal = summary.calibrated
    tests = [(t.name, f"{t.statistic:.3f}", f"{t.p_value:.3g}", str(t.n), "yes" if t.significant else "no")
             for t in summary.tests.values()]
    conf = cal.confusion
    if fmt == "table":
        parts = {
            "aggregate.txt": _table(cal.table_rows(), ("Metric", "Value")),
            "per_tier.txt": _table([list(r.values()) for r in per_tier_rows(summary)],
                                   ("Tier", "n", "MAE", "Median AE", "Hit@50 %", "Hit@100 %", "Coverage %",
                                    "Signed")),
            "confusion.txt": _table([[t] + [str(int(c)) for c in conf.row(t)] for t in conf.labels],
                                    ("Actual \\ Predicted",) + conf.labels),
            "tests.txt": _table(tests, ("Test", "Statistic", "p", "n", "Significant")),
        }
        if summary.impact is not None:
            imp = summary.impact
            parts["impact.txt"] = _table(impact_rows(summary), ("Metric", "Initial", "Calibrated")) + \
                f"\nImproved {imp.improved}, worsened {imp.worsened}, unchanged {imp.unchanged} of {imp.n}\n"
        for fname, text in parts.items():
            (out / fname).write_text(text, encoding="utf-8")
            written.append(out / fname)
        return written
    rec_path = out / "records.csv"
    write_records_csv(summary.records, rec_path)
    written.append(rec_path)
    written.append(_write_csv(out / "aggregate.csv", [{"metric": k, "value": v} for k, v in cal.table_rows()]))
    written.append(_write_csv(out / "per_tier.csv", per_tier_rows(summary)))
    written.append(_write_csv(out / "confusion.csv", [{"actual": t, **{p: int(c) for p, c in zip(conf.labels, conf.row(t))}}
                                                      for t in conf.labels]))
    written.append(_write_csv(out / "tests.csv", [t.to_dict() for t in summary.tests.values()]))
    written.append(_write_csv(out / "scatter.csv", [{"name": r.name, "tier": r.tier, "actual": repr(r.actual),
                                                     "predicted": repr(r.midpoint)} for r in summary.records]))
    written.append(_write_csv(out / "heatmap.csv", heatmap_rows(summary.records)))
    written.append(_write_csv(out / "boxplot.csv", boxplot_rows(summary.records)))
    written.append(_write_csv(out / "hitrates.csv", hitrate_rows(summary.records)))
    if summary.impact is not None:
        written.append(_write_csv(out / "impact.csv", [{"metric": m, "initial": a, "calibrated": b}
                                                       for m, a, b in impact_rows(summary)]))
    return written
