"""Static triage of Windows PE samples against known APT classes.

Pipeline: PE features -> shared LDA projection -> one isolation forest
per APT class.  A sample accepted by any forest is flagged as APT.
"""

__version__ = "0.1.0"

from .errors import TriageError  # noqa: E402
from .features import FeatureVector, default_schema, extract_features, parse_pe  # noqa: E402
from .triage import ClassifierRegistry, TriageVerdict, batch_triage, retrain_class, train_all  # noqa: E402

__all__ = [
    "ClassifierRegistry", "FeatureVector", "TriageError", "TriageVerdict", "batch_triage",
    "default_schema", "extract_features", "parse_pe", "retrain_class", "train_all",
]
