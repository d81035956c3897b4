"""Rank-range estimates shared by the pipeline and the metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

CONFIDENCE_LEVELS = ("high", "medium", "low")
WIDTH_TARGET = (30.0, 50.0)


class InvalidEstimate(ValueError):
    pass


@dataclass(frozen=True)
class EstimateRange:
    rank_min: float
    rank_max: float
    confidence: str = "medium"
    rationale: str = ""

    def __post_init__(self):
        if not (self.rank_min > 0 and self.rank_max > 0):
            raise InvalidEstimate(f"ranks must be positive: [{self.rank_min}, {self.rank_max}]")
        if self.rank_min > self.rank_max:
            raise InvalidEstimate(f"rankMin {self.rank_min} > rankMax {self.rank_max}")
        if self.confidence not in CONFIDENCE_LEVELS:
            raise InvalidEstimate(f"confidence must be one of {CONFIDENCE_LEVELS}")

    @property
    def midpoint(self) -> float:
        return (self.rank_min + self.rank_max) / 2

    @property
    def width(self) -> float:
        return self.rank_max - self.rank_min

    def contains(self, rank: float) -> bool:
        return self.rank_min <= rank <= self.rank_max

    @property
    def width_target_met(self) -> bool:
        return WIDTH_TARGET[0] <= self.width <= WIDTH_TARGET[1]

    def to_dict(self) -> dict:
        return {"rankMin": self.rank_min, "rankMax": self.rank_max,
                "confidence": self.confidence, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EstimateRange":
        try:
            lo, hi = d["rankMin"], d["rankMax"]
        except (KeyError, TypeError):
            raise InvalidEstimate("missing rankMin/rankMax") from None
        if isinstance(lo, bool) or isinstance(hi, bool) or not isinstance(lo, (int, float)) \
                or not isinstance(hi, (int, float)):
            raise InvalidEstimate("rankMin/rankMax must be numbers")
        return cls(float(lo), float(hi), str(d.get("confidence", "medium")).lower(),
                   str(d.get("rationale", "")))
