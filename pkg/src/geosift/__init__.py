"""geosift: filtering and geo-referencing engine for geotagged image
collections.

Distills large geotagged image sets down to images verifiably showing a
specific building, assigns each survivor a reference building footprint
and a weak function label, and evaluates classifier predictions against
those labels.
"""

__version__ = "0.1.0"

from .manifest import (  # noqa: F401
    Detection,
    FunctionClass,
    ImageRecord,
    Stage,
    Thresholds,
    ValidationError,
    read_manifest,
    write_manifest,
)
