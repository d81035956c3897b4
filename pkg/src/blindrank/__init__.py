"""Blind, tool-calibrated estimation of university ranks from bibliometrics,
with a leave-one-out evaluation harness."""

from .bibliometrics import FEATURE_NAMES, FeatureVector, RawInstitutionData, compute_features
from .estimates import EstimateRange
from .evalmetrics import PredictionRecord, summarize
from .ranking_store import RankingStore, hide
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = ["FEATURE_NAMES", "FeatureVector", "RawInstitutionData", "compute_features", "EstimateRange",
           "PredictionRecord", "summarize", "RankingStore", "hide", "run_pipeline", "__version__"]
