"""Three-stage estimation: blind first pass, tool-driven calibration, report."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import re
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .anonymization import AnonymizedProfile, InstitutionProfile, anonymize, build_profile, verify_no_leakage
from .backends import Backend, BackendError, BackendReply, BackendRequest, BackendUnavailable
from .bibliometrics import FEATURE_NAMES, METRIC_LABELS, RawInstitutionData
from .estimates import EstimateRange, InvalidEstimate
from .ranking_store import TOOL_NAMES, TOOL_SCHEMAS, RankingStore, StoreView, execute_tool, hide

log = logging.getLogger(__name__)

SYSTEMS = ("QS", "THE", "ARWU")
MAX_STEPS = 12
MAX_TOOL_CALLS = 10
MAX_ATTEMPTS = 3  # first ask plus two re-asks
DEFAULT_SYSTEM_SIZE = 2000
REPORT_SECTIONS = (
    "Estimated Global Rank Range",
    "Methodology Breakdown",
    "Strengths",
    "Weaknesses",
    "Citation Quality Assessment",
    "Comparable Peers",
    "Strategic Recommendations",
)

FLAG_PRIOR = "stage1_failed_whole_range_prior"
FLAG_SKIPPED = "calibration_skipped_no_tools"
FLAG_BUDGET = "step_budget_exhausted"
FLAG_TOOL_BUDGET = "tool_budget_exhausted"
FLAG_WIDTH_UNMET = "width_target_unmet"
FLAG_NO_REPORT = "report_absent"


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Prompt assets

def _asset(name: str) -> str:
    return resources.files("blindrank").joinpath(f"data/prompts/{name}").read_text(encoding="utf-8")


def _template(name: str) -> str:
    return "\n".join(line for line in _asset(name).splitlines() if not line.startswith("# template-version"))


def system_weights() -> Dict[str, List[str]]:
    return json.loads(_asset("system_weights.json"))


def _weights_block(systems: Sequence[str]) -> str:
    weights = system_weights()
    lines = []
    for s in systems:
        lines.append(f"{s}: " + "; ".join(weights.get(s, ["(no methodology notes)"])))
    return "\n".join(lines)


def stage1_messages(anon: AnonymizedProfile, systems: Sequence[str]) -> List[dict]:
    system = _template("stage1.txt").format(systems=", ".join(systems), weights=_weights_block(systems))
    return [{"role": "system", "content": system},
            {"role": "user", "content": "Anonymized profile:\n" + anon.serialize()}]


def stage2_messages(system: str, anon: AnonymizedProfile, initial: EstimateRange,
                    flags: Sequence[str] = ()) -> List[dict]:
    prompt = _template("stage2_calibration.txt").format(system=system, weights=_weights_block([system]),
                                                        max_tool_calls=MAX_TOOL_CALLS)
    first = {"rankMin": initial.rank_min, "rankMax": initial.rank_max, "confidence": initial.confidence}
    note = ""
    if FLAG_PRIOR in flags:
        note = "\nNote: no first-pass estimate was available; the range above covers the whole ranking."
    return [{"role": "system", "content": prompt},
            {"role": "user", "content": "Anonymized profile:\n" + anon.serialize()
                                        + "\n\nFirst-pass range:\n" + json.dumps(first) + note}]


# ---------------------------------------------------------------------------
# Result types

@dataclass
class InitialEstimate:
    ranges: Dict[str, EstimateRange]
    flags: Dict[str, List[str]] = field(default_factory=dict)
    attempts: int = 1

    def __getitem__(self, system: str) -> EstimateRange:
        return self.ranges[system]

    def to_dict(self) -> dict:
        return {"ranges": {s: r.to_dict() for s, r in self.ranges.items()},
                "flags": {s: list(f) for s, f in self.flags.items()}, "attempts": self.attempts}


@dataclass
class TraceStep:
    turn: int
    kind: str  # tool | final | invalid | reasoning
    tool_calls: List[dict] = field(default_factory=list)
    summary: str = ""

    def to_dict(self) -> dict:
        return {"turn": self.turn, "kind": self.kind, "toolCalls": self.tool_calls, "summary": self.summary}


@dataclass
class CalibrationTrace:
    system: str
    initial: EstimateRange
    steps: List[TraceStep] = field(default_factory=list)
    final: Optional[EstimateRange] = None
    completed: bool = False
    flags: List[str] = field(default_factory=list)
    tool_calls: int = 0
    refusals: int = 0
    peers: List[str] = field(default_factory=list)

    @property
    def step_count(self) -> int:
        return len(self.steps)

    @property
    def width_target_met(self) -> bool:
        return self.final is not None and self.final.width_target_met

    def to_dict(self) -> dict:
        return {"system": self.system, "initial": self.initial.to_dict(),
                "final": self.final.to_dict() if self.final else None, "completed": self.completed,
                "stepCount": self.step_count, "toolCalls": self.tool_calls, "refusals": self.refusals,
                "widthTargetMet": self.width_target_met, "flags": list(self.flags),
                "steps": [s.to_dict() for s in self.steps]}


@dataclass
class Report:
    text: str
    sections: Dict[str, str]

    @property
    def missing_sections(self) -> List[str]:
        return [s for s in REPORT_SECTIONS if s not in self.sections]

    @classmethod
    def parse(cls, text: str) -> "Report":
        sections: Dict[str, str] = {}
        current = None
        buf: List[str] = []
        for line in text.splitlines():
            m = re.match(r"^#{1,3}\s+(.*?)\s*$", line)
            if m:
                if current is not None:
                    sections[current] = "\n".join(buf).strip()
                current, buf = m.group(1), []
            else:
                buf.append(line)
        if current is not None:
            sections[current] = "\n".join(buf).strip()
        return cls(text, sections)


@dataclass
class PipelineResult:
    anon: Optional[AnonymizedProfile]
    initial: Optional[InitialEstimate] = None
    traces: Dict[str, CalibrationTrace] = field(default_factory=dict)
    report: Optional[Report] = None
    flags: List[str] = field(default_factory=list)
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    usage: Dict[str, int] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    evaluation_mode: bool = False

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    @property
    def calibrated(self) -> Dict[str, EstimateRange]:
        return {s: t.final for s, t in self.traces.items() if t.final is not None}

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "anonId": self.anon.opaque_id if self.anon else None,
            "anonProfile": self.anon.payload if self.anon else None,
            "evaluationMode": self.evaluation_mode,
            "initial": self.initial.to_dict() if self.initial else None,
            "calibration": {s: t.to_dict() for s, t in self.traces.items()},
            "report": self.report.text if self.report else None,
            "flags": list(self.flags), "failedStage": self.failed_stage, "error": self.error,
            "usage": dict(sorted(self.usage.items())),
        }
        if include_timings:
            d["timings"] = dict(self.timings)
        return d

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, ensure_ascii=False, sort_keys=False)


def _add_usage(total: Dict[str, int], reply: BackendReply, lock=None) -> None:
    for k, v in reply.usage.items():
        total[k] = total.get(k, 0) + v


def _call(backend: Backend, request: BackendRequest, stage: str) -> BackendReply:
    try:
        return backend.complete(request)
    except BackendUnavailable:
        raise
    except BackendError as exc:
        raise StageFailure(stage, str(exc)) from exc


def _parse_json(content: Optional[str]) -> Any:
    if content is None:
        raise InvalidEstimate("empty reply")
    text = content.strip()
    fence = re.match(r"^```(?:json)?\s*(.*?)\s*```$", text, re.S)
    if fence:
        text = fence.group(1)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidEstimate(f"not JSON: {exc.msg}") from None


# ---------------------------------------------------------------------------
# Stage 1

def stage1_estimate(anon: AnonymizedProfile, backend: Backend, systems: Sequence[str] = SYSTEMS,
                    view: Optional[StoreView] = None, seed: Optional[int] = None,
                    usage: Optional[Dict[str, int]] = None) -> InitialEstimate:
    """Blind first pass, no tools. Invalid output is re-asked twice.

    Systems still invalid after the last attempt get a flagged whole-range
    prior; if no system is valid the stage fails.
    """
    messages = stage1_messages(anon, systems)
    got: Dict[str, EstimateRange] = {}
    errors: Dict[str, str] = {}
    attempts = 0
    for attempts in range(1, MAX_ATTEMPTS + 1):
        req = BackendRequest("stage1", None, copy.deepcopy(messages), None, seed,
                             {"anon": anon, "view": view, "systems": tuple(systems)})
        reply = _call(backend, req, "stage1")
        if usage is not None:
            _add_usage(usage, reply)
        errors = {}
        try:
            data = _parse_json(reply.content)
            table = data.get("estimates", data) if isinstance(data, dict) else None
            if not isinstance(table, dict):
                raise InvalidEstimate("expected an object of per-system estimates")
        except InvalidEstimate as exc:
            errors = {s: str(exc) for s in systems if s not in got}
            table = {}
        for s in systems:
            if s in got:
                continue
            try:
                got[s] = EstimateRange.from_dict(table[s])
            except KeyError:
                errors[s] = "missing"
            except InvalidEstimate as exc:
                errors[s] = str(exc)
        if not errors:
            break
        messages = messages + [reply.to_message(), {
            "role": "user",
            "content": "The reply was not valid: " + "; ".join(f"{s}: {e}" for s, e in sorted(errors.items()))
                       + ". Reply again with the JSON object only."}]
    if not got:
        raise StageFailure("stage1", "no valid estimate after re-asks: " + "; ".join(errors.values()))
    flags: Dict[str, List[str]] = {}
    for s in systems:
        if s not in got:
            n = view.store.system_size(s) if view is not None and s in view.store.systems else DEFAULT_SYSTEM_SIZE
            got[s] = EstimateRange(1.0, float(n), "low", "whole-range prior")
            flags[s] = [FLAG_PRIOR]
    return InitialEstimate({s: got[s] for s in systems}, flags, attempts)


# ---------------------------------------------------------------------------
# Stage 2

def _digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def stage2_calibrate(system: str, anon: AnonymizedProfile, initial: EstimateRange, view: StoreView,
                     backend: Backend, seed: Optional[int] = None, flags: Sequence[str] = (),
                     usage: Optional[Dict[str, int]] = None) -> CalibrationTrace:
    trace = CalibrationTrace(system, initial, flags=list(flags))
    if not backend.supports_tools:
        trace.final = initial
        trace.completed = True
        trace.flags.append(FLAG_SKIPPED)
        return trace
    messages = stage2_messages(system, anon, initial, flags)
    last_proposed: Optional[EstimateRange] = None
    invalid_run = 0
    while trace.step_count < MAX_STEPS:
        turn = trace.step_count
        req = BackendRequest("stage2", system, copy.deepcopy(messages), TOOL_SCHEMAS, seed,
                             {"anon": anon, "view": view, "initial": initial, "systems": (system,)})
        reply = _call(backend, req, "stage2")
        if usage is not None:
            _add_usage(usage, reply)
        messages.append(reply.to_message())
        if reply.tool_calls:
            step = TraceStep(turn, "tool", summary=(reply.content or "")[:200])
            for call in reply.tool_calls:
                if trace.tool_calls >= MAX_TOOL_CALLS:
                    result = {"error": "budget_exhausted",
                              "message": f"tool budget of {MAX_TOOL_CALLS} calls used; give the final range"}
                    if FLAG_TOOL_BUDGET not in trace.flags:
                        trace.flags.append(FLAG_TOOL_BUDGET)
                else:
                    trace.tool_calls += 1
                    result = execute_tool(view, call.name, dict(call.arguments))
                    if result.get("error") == "refused":
                        trace.refusals += 1
                    for row in result.get("samples", []):
                        if row["name"] not in trace.peers:
                            trace.peers.append(row["name"])
                step.tool_calls.append({"name": call.name, "arguments": dict(call.arguments),
                                        "result": _digest(result), "error": result.get("error")})
                messages.append({"role": "tool", "tool_call_id": call.id,
                                 "content": json.dumps(result, ensure_ascii=False)})
            trace.steps.append(step)
            continue
        try:
            est = EstimateRange.from_dict(_parse_json(reply.content))
        except (InvalidEstimate, AttributeError, TypeError) as exc:
            invalid_run += 1
            trace.steps.append(TraceStep(turn, "invalid", summary=str(exc)[:200]))
            if invalid_run >= MAX_ATTEMPTS:
                break
            messages.append({"role": "user", "content": f"The reply was not valid ({exc}). "
                                                        "Reply with the final JSON object only."})
            continue
        trace.steps.append(TraceStep(turn, "final", summary=est.rationale[:200]))
        trace.final = est
        trace.completed = True
        break
    if trace.final is None:
        last_proposed = _last_range(trace, messages)
        trace.final = last_proposed or initial
        trace.flags.append(FLAG_BUDGET)
    if not trace.final.width_target_met:
        trace.flags.append(FLAG_WIDTH_UNMET)
    return trace


def _last_range(trace: CalibrationTrace, messages: Sequence[dict]) -> Optional[EstimateRange]:
    """Most recent range the backend proposed in any assistant message."""
    for m in reversed(messages):
        if m["role"] != "assistant" or not m.get("content"):
            continue
        for blob in reversed(re.findall(r"\{[^{}]*\}", m["content"])):
            try:
                return EstimateRange.from_dict(json.loads(blob))
            except (InvalidEstimate, json.JSONDecodeError, AttributeError, TypeError):
                continue
    return None


def calibrate_all(anon: AnonymizedProfile, initial: InitialEstimate, view: StoreView, backend: Backend,
                  seed: Optional[int] = None, parallel: bool = True,
                  usage: Optional[Dict[str, int]] = None) -> Dict[str, CalibrationTrace]:
    systems = list(initial.ranges)
    usages = [dict() for _ in systems]

    def one(i: int) -> CalibrationTrace:
        s = systems[i]
        return stage2_calibrate(s, anon, initial[s], view, backend, seed, initial.flags.get(s, ()), usages[i])

    if parallel and len(systems) > 1:
        with ThreadPoolExecutor(len(systems)) as pool:
            traces = list(pool.map(one, range(len(systems))))
    else:
        traces = [one(i) for i in range(len(systems))]
    if usage is not None:
        for u in usages:
            for k, v in u.items():
                usage[k] = usage.get(k, 0) + v
    return dict(zip(systems, traces))


# ---------------------------------------------------------------------------
# Stage 3

def _fmt(v: Optional[float], digits: int = 1) -> str:
    if v is None:
        return "missing"
    if float(v).is_integer():
        return str(int(v))
    return f"{v:.{digits}f}"


def render_report(profile: InstitutionProfile, initial: Mapping[str, EstimateRange],
                  calibrated: Mapping[str, EstimateRange], peers: Iterable[str] = ()) -> str:
    """Deterministic report in the required section layout.

    Every number printed comes from the profile or the estimates, so the
    provenance check in :func:`unsupported_values` holds by construction.
    """
    f = profile.features
    z = {e.metric: e for e in profile.zscores.entries}
    lines = [f"# {profile.name}", "", f"## {REPORT_SECTIONS[0]}"]
    for s, est in calibrated.items():
        lines.append(f"- {s}: {_fmt(est.rank_min)} to {_fmt(est.rank_max)} ({est.confidence} confidence)")
    lines += ["", f"## {REPORT_SECTIONS[1]}"]
    for s, est in calibrated.items():
        init = initial.get(s)
        moved = "" if init is None else f", first pass {_fmt(init.rank_min)} to {_fmt(init.rank_max)}"
        lines.append(f"- {s}: calibrated midpoint {_fmt(est.midpoint)}{moved}")
    ranked = sorted(z.values(), key=lambda e: -e.z)
    lines += ["", f"## {REPORT_SECTIONS[2]}"]
    for e in ranked[:3]:
        lines.append(f"- {METRIC_LABELS.get(e.metric, e.metric)} of {_fmt(e.value, 2)} "
                     f"sits near the {e.closest_tier} benchmark")
    lines.append(f"- Research excellence share of {_fmt(f.researchExcellencePct, 2)}%")
    lines += ["", f"## {REPORT_SECTIONS[3]}"]
    for e in ranked[-3:][::-1]:
        lines.append(f"- {METRIC_LABELS.get(e.metric, e.metric)} of {_fmt(e.value, 2)} is its weakest signal")
    if f.influentialRatio is None:
        lines.append("- Influential-citation data is missing")
    lines += ["", f"## {REPORT_SECTIONS[4]}"]
    if f.influentialRatio is None:
        lines.append("Semantic Scholar data is missing for this institution, so citation quality "
                     "cannot be assessed beyond raw counts.")
    else:
        lines.append(f"Influential citation ratio is {_fmt(f.influentialRatio, 4)} across enriched top works.")
    lines.append(f"Two-year mean citedness is {_fmt(f.twoYearMeanCitedness, 2)}.")
    lines += ["", f"## {REPORT_SECTIONS[5]}"]
    peers = list(peers)[:5]
    lines += [f"- {p}" for p in peers] or ["- No comparators were retrieved during calibration"]
    lines += ["", f"## {REPORT_SECTIONS[6]}",
              f"- Lift international collaboration beyond {_fmt(f.intlCollaborationPct, 2)}%",
              f"- Raise open access output beyond {_fmt(f.openAccessPct, 2)}%"]
    return "\n".join(lines) + "\n"


_NUM_RE = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?(?![\w.])")


def _walk_numbers(obj) -> Iterable[float]:
    if isinstance(obj, bool) or obj is None:
        return
    if isinstance(obj, (int, float)):
        yield float(obj)
    elif isinstance(obj, Mapping):
        for v in obj.values():
            yield from _walk_numbers(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _walk_numbers(v)


def profile_numbers(profile: InstitutionProfile, *estimates: Mapping[str, EstimateRange]) -> List[float]:
    vals = list(_walk_numbers(profile.raw.to_dict())) + list(_walk_numbers(profile.features.as_dict()))
    vals += [e.value for e in profile.zscores.entries] + [e.z for e in profile.zscores.entries]
    for table in estimates:
        for est in table.values():
            vals += [est.rank_min, est.rank_max, est.midpoint]
    return vals


def unsupported_values(text: str, sources: Iterable[float], names: Iterable[str] = ()) -> List[str]:
    """Numbers in ``text`` that match no source value at their printed precision.

    Digits inside any of ``names`` (institution or comparator names) are not values.
    """
    sources = list(sources)
    for n in sorted(names, key=len, reverse=True):
        text = text.replace(n, " ")
    missing = []
    for tok in _NUM_RE.findall(text):
        digits = len(tok.split(".")[1]) if "." in tok else 0
        x = float(tok)
        tol = 0.5 * 10 ** -digits + 1e-9
        if not any(abs(v - x) <= tol for v in sources):
            missing.append(tok)
    return missing


def stage3_report(profile: InstitutionProfile, initial: InitialEstimate, traces: Mapping[str, CalibrationTrace],
                  backend: Backend, seed: Optional[int] = None, published_ranks: Optional[Mapping[str, str]] = None,
                  usage: Optional[Dict[str, int]] = None) -> Report:
    calibrated = {s: t.final for s, t in traces.items() if t.final is not None}
    peers: List[str] = []
    for t in traces.values():
        peers += [p for p in t.peers if p not in peers]
    full = {"name": profile.name, "country": profile.raw.country_code, "raw": profile.raw.to_dict(),
            "metrics": profile.features.as_dict(),
            "zScores": [{"metric": e.metric, "z": e.z, "closestTier": e.closest_tier} for e in profile.zscores.entries],
            "publishedRankings": dict(published_ranks or {})}
    body = {"profile": full, "initial": initial.to_dict()["ranges"],
            "calibrated": {s: e.to_dict() for s, e in calibrated.items()}, "comparators": peers}
    prompt = _template("stage3_report.txt").format(sections="\n".join(f"## {s}" for s in REPORT_SECTIONS))
    messages = [{"role": "system", "content": prompt},
                {"role": "user", "content": json.dumps(body, indent=2, ensure_ascii=False)}]
    req = BackendRequest("stage3", None, messages, None, seed,
                         {"profile": profile, "initial": initial.ranges, "calibrated": calibrated, "peers": peers})
    reply = _call(backend, req, "stage3")
    if usage is not None:
        _add_usage(usage, reply)
    if not reply.content:
        raise StageFailure("stage3", "empty report")
    return Report.parse(reply.content)


# ---------------------------------------------------------------------------
# Orchestration

def run_pipeline(university: Union[str, RawInstitutionData], store: RankingStore, backend: Backend, seed: int = 0,
                 systems: Optional[Sequence[str]] = None, view: Optional[StoreView] = None,
                 with_report: bool = True, parallel: bool = True,
                 published_ranks: Optional[Mapping[str, str]] = None,
                 events: Optional[List[str]] = None, evaluation: Optional[bool] = None) -> PipelineResult:
    """Anonymize, estimate, calibrate and report on one institution.

    A name ranked in the store runs in evaluation mode: the target is hidden
    from every tool and no published rank reaches any stage. Otherwise (or
    with ``evaluation=False``) it runs in estimation-only mode.
    """
    t0 = time.perf_counter()
    raw = university if isinstance(university, RawInstitutionData) else store.raw_data(university)
    name = raw.display_name if raw is not None else str(university)
    if raw is None:
        return PipelineResult(None, failed_stage="input", error=f"no data for {name!r}")
    if evaluation is None:
        evaluation = name in store and bool(store.ranks_of(name))
    if view is None:
        view = hide(store, name) if evaluation else store.full_view()
    systems = tuple(systems or [s for s in SYSTEMS if s in store.systems] or SYSTEMS)
    ranks = None if evaluation else published_ranks
    features = store.cached_features(name) if name in store else None
    profile = build_profile(raw, store.benchmarks, ranks, features)
    anon = anonymize(profile, seed)
    result = PipelineResult(anon, evaluation_mode=evaluation)
    leak = verify_no_leakage(profile, anon)
    if events is not None:
        events += ["anonymize", "verify_no_leakage:" + ("pass" if leak.passed else "fail")]
    if not leak.passed:
        result.failed_stage, result.error = "anonymization", leak.summary()
        return result
    usage: Dict[str, int] = {}
    try:
        t = time.perf_counter()
        result.initial = stage1_estimate(anon, backend, systems, view, seed, usage)
        result.timings["stage1"] = time.perf_counter() - t
        for s, fl in result.initial.flags.items():
            result.flags += [f"{s}:{x}" for x in fl]
        t = time.perf_counter()
        result.traces = calibrate_all(anon, result.initial, view, backend, seed, parallel, usage)
        result.timings["stage2"] = time.perf_counter() - t
        for s, tr in result.traces.items():
            result.flags += [f"{s}:{x}" for x in tr.flags if x != FLAG_PRIOR]
    except StageFailure as exc:
        result.failed_stage, result.error = exc.stage, str(exc)
        result.usage = usage
        return result
    if with_report:
        t = time.perf_counter()
        try:
            result.report = stage3_report(profile, result.initial, result.traces, backend, seed, ranks, usage)
        except BackendUnavailable:
            raise
        except (StageFailure, BackendError) as exc:
            log.warning("report stage failed: %s", exc)
            result.flags.append(FLAG_NO_REPORT)
        result.timings["stage3"] = time.perf_counter() - t
    else:
        result.flags.append(FLAG_NO_REPORT)
    result.usage = usage
    result.timings["total"] = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------------------
# Nearest-neighbour baseline

def _confidence(width: float) -> str:
    if width <= 40:
        return "high"
    if width <= 100:
        return "medium"
    return "low"


def knn_neighbours(target: np.ndarray, population: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest rows under per-feature z-normalized Euclidean distance.

    Features missing in the target, or constant across the population, are
    ignored; a missing population value contributes the mean squared gap.
    Ties go to the lower index.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-missing columns are dropped below
        sd = np.nanstd(population, axis=0)
    use = np.isfinite(target) & np.isfinite(sd) & (sd > 0)
    if not use.any():
        raise ValueError("no usable features for distance")
    sq = ((population[:, use] - target[use]) / sd[use]) ** 2
    fill = np.nanmean(sq, axis=1, keepdims=True)
    sq = np.where(np.isnan(sq), np.nan_to_num(fill, nan=0.0), sq)
    dist = np.sqrt(sq.sum(axis=1))
    order = np.lexsort((np.arange(len(dist)), dist))
    return order[:k]


def baseline_estimate(anon: AnonymizedProfile, view: StoreView, k: int = 5, system: str = "THE") -> EstimateRange:
    """k-NN range: [min, max] of the neighbours' ranks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pop = view.cached_population(system)
    if not pop:
        raise ValueError(f"no cached features for {system}")
    k = min(k, len(pop))
    X = np.vstack([fv.as_array() for _, fv in pop])
    target = anon.features.as_array()
    idx = knn_neighbours(target, X, k)
    ranks = [pop[i][0].representative for i in idx]
    lo, hi = float(min(ranks)), float(max(ranks))
    return EstimateRange(lo, hi, _confidence(hi - lo), f"{k} nearest neighbours in {system}")


__all__ = [
    "SYSTEMS", "MAX_STEPS", "MAX_TOOL_CALLS", "REPORT_SECTIONS", "StageFailure", "InitialEstimate",
    "CalibrationTrace", "TraceStep", "Report", "PipelineResult", "stage1_estimate", "stage2_calibrate",
    "calibrate_all", "stage3_report", "run_pipeline", "baseline_estimate", "knn_neighbours",
    "render_report", "unsupported_values", "profile_numbers", "EstimateRange", "TOOL_NAMES", "FEATURE_NAMES",
]
