"""Food commodity price forecasting and early-warning toolkit."""

from .errors import FoodWarnError
from .ingest import FeatureTable, ObservationKey, WarningLabel, WarningLabelSet

__version__ = "0.1.0"

__all__ = ["FeatureTable", "FoodWarnError", "ObservationKey", "WarningLabel", "WarningLabelSet", "__version__"]
