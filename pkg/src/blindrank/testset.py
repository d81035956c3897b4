"""Stratified test-set construction: consensus rank, tier and region strata."""

from __future__ import annotations

import csv
import logging
import random
import statistics
from fractions import Fraction
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .ingestion import RankValue

log = logging.getLogger(__name__)

TIERS = ("Elite", "Strong", "Mid", "Lower", "Tail")
TIER_BOUNDS = {"Elite": (1, 25), "Strong": (26, 150), "Mid": (151, 400), "Lower": (401, 700),
               "Tail": (701, float("inf"))}
REGIONS = ("North America", "Europe", "Asia-Pacific", "Rest of World", "Mixed")
DEFAULT_REGION_SHARES = {"North America": 0.20, "Europe": 0.25, "Asia-Pacific": 0.25,
                         "Rest of World": 0.15, "Mixed": 0.15}

TESTSET_COLUMNS = ("name", "openalex_id", "tier", "region", "consensus_rank", "seed")


class ExcludedFromUniverse(ValueError):
    """No ranking system ranks this university."""


@dataclass(frozen=True)
class ConsensusRank:
    name: str
    rank: float
    systems: Tuple[str, ...]


def _as_float(r) -> float:
    return r.midpoint if isinstance(r, RankValue) else float(r)


def consensus_rank(ranks: Mapping[str, Optional[object]], name: str = "") -> ConsensusRank:
    """Median over non-null ranks; bands contribute their midpoint."""
    present = {s: _as_float(r) for s, r in ranks.items() if r is not None}
    if not present:
        raise ExcludedFromUniverse(name or "no ranks")
    return ConsensusRank(name, float(statistics.median(present.values())), tuple(sorted(present)))


def assign_tier(consensus: float) -> str:
    if consensus < 1:
        raise ValueError(f"rank must be >= 1, got {consensus}")
    if consensus <= 25:
        return "Elite"
    if consensus <= 150:
        return "Strong"
    if consensus <= 400:
        return "Mid"
    if consensus <= 700:
        return "Lower"
    return "Tail"


def load_region_map(path: Union[str, Path, None] = None) -> Dict[str, str]:
    """ISO alpha-2 code -> region. Unknown codes map to ``Mixed``."""
    if path is None:
        text = resources.files("blindrank").joinpath("data/regions.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {row["iso2"].upper(): row["region"] for row in csv.DictReader(text.splitlines())}


_REGION_MAP: Optional[Dict[str, str]] = None


def region_for(country_code: str, region_map: Optional[Mapping[str, str]] = None) -> str:
    global _REGION_MAP
    if region_map is None:
        if _REGION_MAP is None:
            _REGION_MAP = load_region_map()
        region_map = _REGION_MAP
    return region_map.get((country_code or "").upper(), "Mixed")


@dataclass(frozen=True)
class UniverseMember:
    name: str
    openalex_id: str
    consensus: float
    region: str

    @property
    def tier(self) -> str:
        return assign_tier(self.consensus)


@dataclass(frozen=True)
class TestSetSpec:
    __test__ = False

    size: int = 500
    tier_shares: Mapping[str, float] = field(default_factory=lambda: {t: 0.2 for t in TIERS})
    region_shares: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_REGION_SHARES))
    seed: int = 0

    def __post_init__(self):
        for label, shares in (("tier", self.tier_shares), ("region", self.region_shares)):
            if abs(sum(shares.values()) - 1.0) > 1e-9:
                raise ValueError(f"{label} shares must sum to 1")


@dataclass(frozen=True)
class TestSetMember:
    __test__ = False

    name: str
    openalex_id: str
    tier: str
    region: str
    consensus_rank: float
    seed: int


def largest_remainder(total: int, shares: Mapping[str, float]) -> Dict[str, int]:
    """Apportion ``total`` seats by the largest-remainder method.

    Ties in the remainder go to the key that comes first in ``shares``.
    """
    keys = list(shares)
    exact = {k: Fraction(repr(float(v))) for k, v in shares.items()}
    weight = sum(exact.values())
    quotas = {k: total * exact[k] / weight for k in keys}
    seats = {k: int(quotas[k]) for k in keys}
    left = total - sum(seats.values())
    order = sorted(keys, key=lambda k: (-(quotas[k] - seats[k]), keys.index(k)))
    for k in order[:left]:
        seats[k] += 1
    return seats


def allocate_with_capacity(total: int, shares: Mapping[str, float], capacity: Mapping[str, int]) -> Dict[str, int]:
    """Largest-remainder allocation; shortfall in full cells spills to the others."""
    total = min(total, sum(capacity.get(k, 0) for k in shares))
    alloc = {k: 0 for k in shares}
    open_keys = [k for k in shares if capacity.get(k, 0) > 0]
    remaining = total
    while remaining > 0 and open_keys:
        sub = {k: shares[k] for k in open_keys}
        if sum(sub.values()) <= 0:
            sub = {k: 1.0 for k in open_keys}
        want = largest_remainder(remaining, sub)
        for k in open_keys:
            take = min(want[k], capacity[k] - alloc[k])
            alloc[k] += take
            remaining -= take
        open_keys = [k for k in open_keys if alloc[k] < capacity[k]]
    return alloc


def build_testset(universe: Sequence[UniverseMember], spec: TestSetSpec = TestSetSpec()) -> List[TestSetMember]:
    """Per tier, round(size * share) members spread over regions proportionally.

    Deterministic for a fixed seed: candidates are sorted by name before any
    random draw.
    """
    rng = random.Random(spec.seed)
    by_cell: Dict[Tuple[str, str], List[UniverseMember]] = {}
    for m in sorted(universe, key=lambda m: (m.name, m.openalex_id)):
        region = m.region if m.region in spec.region_shares else "Mixed"
        by_cell.setdefault((m.tier, region), []).append(m)

    out: List[TestSetMember] = []
    for tier in TIERS:
        share = spec.tier_shares.get(tier, 0.0)
        quota = int(spec.size * share + 0.5)
        capacity = {r: len(by_cell.get((tier, r), [])) for r in spec.region_shares}
        pop = sum(capacity.values())
        if pop < quota:
            log.warning("tier %s: population %d below quota %d, taking all", tier, pop, quota)
        alloc = allocate_with_capacity(quota, spec.region_shares, capacity)
        for region in spec.region_shares:
            cell = by_cell.get((tier, region), [])
            for m in rng.sample(cell, alloc[region]):
                out.append(TestSetMember(m.name, m.openalex_id, tier, region, m.consensus, spec.seed))
    return out


def filter_for_system(members: Sequence[TestSetMember], ranked_names: Sequence[str]) -> List[TestSetMember]:
    """Members ranked in the target system."""
    keep = set(ranked_names)
    return [m for m in members if m.name in keep]


def write_testset(members: Sequence[TestSetMember], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TESTSET_COLUMNS)
        for m in members:
            w.writerow([m.name, m.openalex_id, m.tier, m.region, repr(float(m.consensus_rank)), m.seed])


def read_testset(path: Union[str, Path]) -> List[TestSetMember]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [TestSetMember(r["name"], r["openalex_id"], r["tier"], r["region"],
                          float(r["consensus_rank"]), int(r["seed"])) for r in rows]
