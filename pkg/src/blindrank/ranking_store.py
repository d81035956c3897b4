"""Ground-truth ranking store with leave-one-out views and the calibration tools.

Hiding a university never mutates the store. :func:`hide` returns a
:class:`StoreView` that filters the target out of every query path, so several
evaluations can run against one store concurrently.
"""

from __future__ import annotations

import itertools
import json
import logging
import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .anonymization import fold
from .bibliometrics import FeatureVector, RawInstitutionData, TierBenchmark, compute_features, default_benchmarks
from .ingestion import GroundTruthTable, RankValue

log = logging.getLogger(__name__)


class UnknownUniversityError(KeyError):
    pass


class LeakageRefusal(PermissionError):
    """A tool asked for the hidden evaluation target."""


def normalize_name(name: str) -> str:
    return fold(name)


@dataclass(frozen=True)
class RankedEntry:
    name: str
    system: str
    rank: RankValue
    sub_scores: Mapping[str, float] = field(default_factory=dict)

    @property
    def representative(self) -> float:
        return self.rank.midpoint

    def to_tool_dict(self) -> dict:
        return {"name": self.name, "rank": self.rank.label(), "rankValue": self.rank.midpoint,
                "isBand": self.rank.is_band, "subScores": dict(self.sub_scores)}


class RankingStore:
    """Immutable after construction. Feature memoization does not count as state."""

    def __init__(self, tables: Mapping[str, GroundTruthTable],
                 features: Optional[Mapping[str, FeatureVector]] = None,
                 raw: Optional[Mapping[str, RawInstitutionData]] = None,
                 benchmarks: Optional[Sequence[TierBenchmark]] = None):
        self._entries: Dict[str, Tuple[RankedEntry, ...]] = {}
        self._names: Dict[str, str] = {}
        for system, table in tables.items():
            rows = [RankedEntry(e.name, system, e.rank, dict(e.sub_scores)) for e in table.entries]
            rows.sort(key=lambda r: (r.representative, normalize_name(r.name)))
            self._entries[system] = tuple(rows)
            for r in rows:
                self._names.setdefault(normalize_name(r.name), r.name)
        self._features = {normalize_name(k): v for k, v in (features or {}).items()}
        self._raw = {normalize_name(k): v for k, v in (raw or {}).items()}
        for k in itertools.chain(self._features, self._raw):
            if k not in self._names:
                src = (features or {}) if k in self._features else (raw or {})
                self._names[k] = next(n for n in src if normalize_name(n) == k)
        self.benchmarks = list(benchmarks) if benchmarks is not None else default_benchmarks()
        self._memo: Dict[str, FeatureVector] = {}
        self._memo_lock = threading.Lock()
        self._tokens = itertools.count(1)

    @property
    def systems(self) -> Tuple[str, ...]:
        return tuple(self._entries)

    def universities(self) -> List[str]:
        return sorted(self._names.values())

    def __contains__(self, name: str) -> bool:
        return normalize_name(name) in self._names

    def __len__(self) -> int:
        return len(self._names)

    def canonical(self, name: str) -> str:
        try:
            return self._names[normalize_name(name)]
        except KeyError:
            raise UnknownUniversityError(name) from None

    def entries(self, system: str) -> Tuple[RankedEntry, ...]:
        return self._entries[system]

    def system_size(self, system: str) -> int:
        return len(self._entries[system])

    def rank_of(self, name: str, system: str) -> Optional[RankValue]:
        """Ground truth lookup for the harness; bypasses views by design."""
        key = normalize_name(name)
        for e in self._entries.get(system, ()):
            if normalize_name(e.name) == key:
                return e.rank
        return None

    def ranks_of(self, name: str) -> Dict[str, RankValue]:
        return {s: r for s in self._entries if (r := self.rank_of(name, s)) is not None}

    def raw_data(self, name: str) -> Optional[RawInstitutionData]:
        return self._raw.get(normalize_name(name))

    def cached_features(self, name: str) -> Optional[FeatureVector]:
        return self._features.get(normalize_name(name))

    def features_for(self, name: str) -> FeatureVector:
        key = normalize_name(name)
        if key in self._features:
            return self._features[key]
        with self._memo_lock:
            if key in self._memo:
                return self._memo[key]
        raw = self._raw.get(key)
        if raw is None:
            raise UnknownUniversityError(name)
        fv = compute_features(raw, self.benchmarks)
        with self._memo_lock:
            self._memo.setdefault(key, fv)
        return fv

    def fingerprint(self) -> tuple:
        return (tuple((s, rows) for s, rows in self._entries.items()),
                tuple(sorted(self._features.items())), tuple(sorted(self._raw)))

    def __eq__(self, other):
        if not isinstance(other, RankingStore):
            return NotImplemented
        return self.fingerprint() == other.fingerprint()

    def full_view(self) -> "StoreView":
        return StoreView(self, frozenset(), next(self._tokens))


class StoreView:
    """Read-only window on a store that excludes a hidden set of universities."""

    def __init__(self, store: RankingStore, hidden: FrozenSet[str], token: int):
        self.store = store
        self.hidden = hidden
        self.token = token
        self.leakage_attempts: List[str] = []
        self._lock = threading.Lock()

    def is_hidden(self, name: str) -> bool:
        return normalize_name(name) in self.hidden

    def visible_entries(self, system: str) -> List[RankedEntry]:
        if system not in self.store.systems:
            raise KeyError(f"unknown ranking system {system!r}")
        return [e for e in self.store.entries(system) if normalize_name(e.name) not in self.hidden]

    def __len__(self) -> int:
        return sum(1 for n in self.store.universities() if not self.is_hidden(n))

    def get_ranking_samples(self, system: str, rank_min: float, rank_max: float, count: int,
                            seed: Optional[int] = None) -> List[RankedEntry]:
        """Up to ``count`` visible entries in ``[rank_min, rank_max]``, evenly spread, ascending.

        Without a seed the picks sit at the centres of equal strides; a seed
        shifts the offset within the first stride deterministically.
        """
        if not 1 <= rank_min <= rank_max:
            raise ValueError(f"invalid rank range [{rank_min}, {rank_max}]")
        if count < 1:
            raise ValueError("count must be >= 1")
        pool = [e for e in self.visible_entries(system) if rank_min <= e.representative <= rank_max]
        if len(pool) <= count:
            return pool
        step = len(pool) / count
        offset = step / 2 if seed is None else random.Random(seed).uniform(0, step)
        picks = [min(len(pool) - 1, int(offset + i * step)) for i in range(count)]
        return [pool[i] for i in picks]

    def compute_metrics(self, university_name: str) -> FeatureVector:
        if self.is_hidden(university_name):
            with self._lock:
                self.leakage_attempts.append(university_name)
            log.warning("view %d: refused metrics request for hidden target", self.token)
            raise LeakageRefusal("university not available")
        if university_name not in self.store:
            raise UnknownUniversityError(university_name)
        return self.store.features_for(university_name)

    def cached_population(self, system: str) -> List[Tuple[RankedEntry, FeatureVector]]:
        """Visible ranked entries that have features available (cache or raw data)."""
        out = []
        for e in self.visible_entries(system):
            if self.store.cached_features(e.name) is not None or self.store.raw_data(e.name) is not None:
                out.append((e, self.store.features_for(e.name)))
        return out


def hide(store: RankingStore, university: str) -> StoreView:
    if university not in store:
        raise UnknownUniversityError(university)
    return StoreView(store, frozenset({normalize_name(university)}), next(store._tokens))


def verify_hidden(view: StoreView, university: str) -> bool:
    """True iff neither tool can return ``university`` through ``view``."""
    key = normalize_name(university)
    if key not in view.hidden:
        return False
    for system in view.store.systems:
        if any(normalize_name(e.name) == key for e in view.visible_entries(system)):
            return False
    # compute_metrics refuses exactly the names the view reports as hidden
    return view.is_hidden(university)


# ---------------------------------------------------------------------------
# Tool wire layer

TOOL_SCHEMAS = [
    {
        "type": "function",
        "function": {
            "name": "get_ranking_samples",
            "description": "Returns real universities within the specified rank range, with names, "
                           "actual ranks and official sub-scores.",
            "parameters": {
                "type": "object",
                "properties": {
                    "system": {"type": "string", "description": "Ranking system, e.g. THE"},
                    "rankMin": {"type": "integer", "minimum": 1},
                    "rankMax": {"type": "integer", "minimum": 1},
                    "count": {"type": "integer", "minimum": 1, "maximum": 20},
                },
                "required": ["system", "rankMin", "rankMax", "count"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "compute_metrics",
            "description": "Computes the full bibliometric feature set for a named university.",
            "parameters": {
                "type": "object",
                "properties": {"universityName": {"type": "string"}},
                "required": ["universityName"],
            },
        },
    },
]

TOOL_NAMES = tuple(t["function"]["name"] for t in TOOL_SCHEMAS)
REFUSAL_MESSAGE = "This university is not available for comparison."


def execute_tool(view: StoreView, name: str, arguments, seed: Optional[int] = None) -> dict:
    """Run one tool call against ``view`` and return a JSON-serializable result.

    Errors come back as ``{"error": ...}`` payloads so the agent loop continues.
    """
    if isinstance(arguments, str):
        try:
            arguments = json.loads(arguments or "{}")
        except json.JSONDecodeError:
            return {"error": "invalid_arguments", "message": "arguments are not valid JSON"}
    try:
        if name == "get_ranking_samples":
            rows = view.get_ranking_samples(str(arguments["system"]), float(arguments["rankMin"]),
                                            float(arguments["rankMax"]), int(arguments.get("count", 3)),
                                            seed=seed)
            return {"system": arguments["system"], "samples": [r.to_tool_dict() for r in rows]}
        if name == "compute_metrics":
            fv = view.compute_metrics(str(arguments["universityName"]))
            return {"universityName": view.store.canonical(arguments["universityName"]),
                    "metrics": fv.as_dict()}
    except LeakageRefusal:
        return {"error": "refused", "message": REFUSAL_MESSAGE}
    except UnknownUniversityError:
        return {"error": "not_found", "message": "no such university in the ranking store"}
    except (KeyError, TypeError, ValueError) as exc:
        return {"error": "invalid_arguments", "message": str(exc)}
    return {"error": "unknown_tool", "message": f"no tool named {name!r}"}
