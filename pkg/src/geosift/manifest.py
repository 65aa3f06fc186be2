"""Canonical data model and line-delimited interchange formats.

Every pipeline stage reads and writes the same manifest format: UTF-8
JSON lines, one image record per line. Unknown fields are carried
opaquely so external tooling can extend records without breaking
round-trips.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional


class ValidationError(ValueError):
    """Raised when a record or file violates a format invariant."""


class FunctionClass(Enum):
    """Homogenized building function class."""

    COMMERCIAL = "commercial"
    RESIDENTIAL = "residential"
    OTHER = "other"

    @classmethod
    def parse(cls, value: str) -> "FunctionClass":
        try:
            return cls(value)
        except ValueError:
            raise ValidationError(f"unknown function class: {value!r}") from None


class Stage(Enum):
    """Pipeline stages in execution order; value encodes the order."""

    INGESTED = 0
    SIMILARITY = 1
    DETECTION = 2
    UNIQUE_LOCATION = 3
    DIRECTION = 4
    SIGHTLINE = 5
    LABELED = 6

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str) -> "Stage":
        try:
            return cls[value.upper()]
        except KeyError:
            raise ValidationError(f"unknown stage: {value!r}") from None

    def __lt__(self, other: "Stage") -> bool:
        return self.value < other.value

    def __le__(self, other: "Stage") -> bool:
        return self.value <= other.value


# Stages in pipeline order, excluding the initial ingest pseudo-stage.
PIPELINE_STAGES = [
    Stage.SIMILARITY,
    Stage.DETECTION,
    Stage.UNIQUE_LOCATION,
    Stage.DIRECTION,
    Stage.SIGHTLINE,
    Stage.LABELED,
]


def normalize_bearing(bearing: float) -> float:
    """Map a compass angle in degrees onto [0, 360); 360.0 becomes 0.0."""
    if not math.isfinite(bearing):
        raise ValidationError(f"bearing must be finite, got {bearing}")
    return bearing % 360.0


@dataclass
class ImageRecord:
    """One geotagged image with its per-stage filter parameters."""

    image_id: str
    lat: float
    lon: float
    bearing: Optional[float] = None
    p_sim: Optional[float] = None
    p_score: Optional[float] = None
    p_size: Optional[float] = None
    p_dist: Optional[float] = None
    building_id: Optional[str] = None
    weak_label: Optional[FunctionClass] = None
    stage_reached: Stage = Stage.INGESTED
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"lat {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"lon {self.lon} outside [-180, 180]")
        if self.bearing is not None:
            self.bearing = normalize_bearing(self.bearing)
        if self.p_dist is not None and self.p_dist < 0:
            raise ValidationError(f"p_dist {self.p_dist} must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "image_id": self.image_id,
            "lat": self.lat,
            "lon": self.lon,
        }
        for name in ("bearing", "p_sim", "p_score", "p_size", "p_dist", "building_id"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.weak_label is not None:
            out["weak_label"] = self.weak_label.value
        out["stage_reached"] = self.stage_reached.key
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ImageRecord":
        known = {
            "image_id", "lat", "lon", "bearing", "p_sim", "p_score",
            "p_size", "p_dist", "building_id", "weak_label", "stage_reached",
        }
        try:
            image_id = str(raw["image_id"])
            lat = float(raw["lat"])
            lon = float(raw["lon"])
        except KeyError as exc:
            raise ValidationError(f"missing required field {exc}") from None
        weak = raw.get("weak_label")
        stage = raw.get("stage_reached", "ingested")
        return cls(
            image_id=image_id,
            lat=lat,
            lon=lon,
            bearing=_opt_float(raw.get("bearing")),
            p_sim=_opt_float(raw.get("p_sim")),
            p_score=_opt_float(raw.get("p_score")),
            p_size=_opt_float(raw.get("p_size")),
            p_dist=_opt_float(raw.get("p_dist")),
            building_id=None if raw.get("building_id") is None else str(raw["building_id"]),
            weak_label=None if weak is None else FunctionClass.parse(weak),
            stage_reached=Stage.parse(stage),
            extra={k: v for k, v in raw.items() if k not in known},
        )


def _opt_float(value: Any) -> Optional[float]:
    return None if value is None else float(value)


@dataclass(frozen=True)
class Thresholds:
    """The four pipeline hyperparameters.

    Defaults match the reference operating point: t_sim=0.70,
    t_score=0.3, t_size=0.2, t_dist=250 m.
    """

    t_sim: float = 0.70
    t_score: float = 0.3
    t_size: float = 0.2
    t_dist: float = 250.0

    def __post_init__(self) -> None:
        if not -1.0 <= self.t_sim <= 1.0:
            raise ValidationError(f"t_sim {self.t_sim} outside [-1, 1]")
        if not 0.0 <= self.t_score <= 1.0:
            raise ValidationError(f"t_score {self.t_score} outside [0, 1]")
        if not 0.0 <= self.t_size <= 1.0:
            raise ValidationError(f"t_size {self.t_size} outside [0, 1]")
        if not self.t_dist > 0:
            raise ValidationError(f"t_dist {self.t_dist} must be > 0")

    def to_dict(self) -> Dict[str, float]:
        return {
            "t_sim": self.t_sim,
            "t_score": self.t_score,
            "t_size": self.t_size,
            "t_dist": self.t_dist,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "Thresholds":
        return cls(**{k: float(raw[k]) for k in ("t_sim", "t_score", "t_size", "t_dist")})

    def replace(self, **kwargs: float) -> "Thresholds":
        merged = self.to_dict()
        merged.update(kwargs)
        return Thresholds.from_dict(merged)


@dataclass(frozen=True)
class Detection:
    """One detected object in an image."""

    class_name: str
    score: float
    rel_size: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"detection score {self.score} outside [0, 1]")
        if not 0.0 <= self.rel_size <= 1.0:
            raise ValidationError(f"detection rel_size {self.rel_size} outside [0, 1]")


def read_manifest(path: str) -> List[ImageRecord]:
    """Read a line-delimited manifest file, preserving field order and extras.

    Raises ValidationError naming the offending line on malformed input.
    """
    records: List[ImageRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record: {exc}") from None
            try:
                records.append(ImageRecord.from_dict(raw))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return records


def write_manifest(records: Iterable[ImageRecord], path: str) -> None:
    """Write records as one JSON object per line; round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict()) + "\n")
