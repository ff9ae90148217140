"""Lateral-movement detection from authentication and process logs."""

__version__ = "0.1.0"

from .features import FEATURE_NAMES, EngineConfig, FeatureEngine, FeatureRecord, LabelEncoding, featurize
from .fastpath import featurize_columnar
from .table import FeatureTable

__all__ = [
    "FEATURE_NAMES", "EngineConfig", "FeatureEngine", "FeatureRecord", "FeatureTable",
    "LabelEncoding", "featurize", "featurize_columnar",
]
