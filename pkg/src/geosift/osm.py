"""Building footprint ingest and tag homogenization.

Building function information can live in three OSM tag keys:
building, amenity, and shop. Each known value maps to one of
commercial / residential / other via a shipped, editable table.
When more than one of the three keys is present and the mapped
classes disagree, the building gets no class at all.
"""

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

from shapely.geometry import Polygon
from shapely.validation import explain_validity

from .manifest import FunctionClass, ValidationError

log = logging.getLogger(__name__)

MAPPED_KEYS = ("building", "amenity", "shop")

Ring = List[Tuple[float, float]]  # (lon, lat) vertices, closed


@dataclass
class BuildingFootprint:
    """One OSM building: polygon rings, raw tags, optional class."""

    building_id: str
    exterior: Ring
    interiors: List[Ring] = field(default_factory=list)
    tags: Dict[str, str] = field(default_factory=dict)
    mapped_class: Optional[FunctionClass] = None

    def polygon(self) -> Polygon:
        return Polygon(self.exterior, self.interiors)


class TagMappingTable:
    """value -> FunctionClass lookup per mapped tag key."""

    def __init__(self, entries: Dict[str, Dict[str, FunctionClass]]):
        self.entries = entries

    @classmethod
    def load(cls, path: Optional[str] = None) -> "TagMappingTable":
        """Load a mapping file; defaults to the shipped table.

        Lines are "<key> <value> <class>"; '#' starts a comment.
        """
        if path is None:
            text = (
                resources.files("geosift.data").joinpath("tag_classes.txt").read_text("utf-8")
            )
        else:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        entries: Dict[str, Dict[str, FunctionClass]] = {k: {} for k in MAPPED_KEYS}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValidationError(f"mapping line {lineno}: expected 3 fields, got {len(parts)}")
            key, value, cls_name = parts
            if key not in entries:
                raise ValidationError(f"mapping line {lineno}: unknown tag key {key!r}")
            if value in entries[key]:
                raise ValidationError(f"mapping line {lineno}: duplicate entry {key}={value}")
            entries[key][value] = FunctionClass.parse(cls_name)
        return cls(entries)

    def lookup(self, key: str, value: str) -> Optional[FunctionClass]:
        return self.entries.get(key, {}).get(value)


def homogenize_label(tags: Dict[str, str], table: TagMappingTable) -> Optional[FunctionClass]:
    """Map tags to a single class, or None on disagreement or no info.

    Unknown tag values are treated as unmapped, not as 'other'.
    """
    classes = set()
    for key in MAPPED_KEYS:
        value = tags.get(key)
        if value is None:
            continue
        mapped = table.lookup(key, value)
        if mapped is not None:
            classes.add(mapped)
    if len(classes) == 1:
        return classes.pop()
    return None


def ingest_buildings(
    path: str, table: Optional[TagMappingTable] = None
) -> List[BuildingFootprint]:
    """Read polygon features (GeoJSON FeatureCollection) into footprints.

    Features that are not polygons, have unclosed rings, or fail
    geometric validation are skipped with a warning; the skip count is
    logged. Tags come from the feature's properties map.
    """
    if table is None:
        table = TagMappingTable.load()
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    features = doc.get("features", [])
    out: List[BuildingFootprint] = []
    skipped = 0
    for i, feature in enumerate(features):
        footprint = _parse_feature(feature, fallback_id=f"feature-{i}")
        if footprint is None:
            skipped += 1
            continue
        footprint.mapped_class = homogenize_label(footprint.tags, table)
        out.append(footprint)
    if skipped:
        log.warning("skipped %d invalid feature(s) in %s", skipped, path)
    return out


def _parse_feature(feature: dict, fallback_id: str) -> Optional[BuildingFootprint]:
    geom = feature.get("geometry") or {}
    if geom.get("type") != "Polygon":
        log.warning("skipping non-polygon feature %s", feature.get("id", fallback_id))
        return None
    rings = geom.get("coordinates") or []
    if not rings:
        return None
    parsed: List[Ring] = []
    for ring in rings:
        pts = [(float(x), float(y)) for x, y in ring]
        if len(pts) < 4 or pts[0] != pts[-1]:
            log.warning("skipping feature %s: open or degenerate ring", feature.get("id", fallback_id))
            return None
        parsed.append(pts)
    properties = {str(k): str(v) for k, v in (feature.get("properties") or {}).items()}
    building_id = str(
        feature.get("id")
        or properties.pop("building_id", None)
        or properties.get("osm_id")
        or fallback_id
    )
    poly = Polygon(parsed[0], parsed[1:])
    if not poly.is_valid:
        log.warning(
            "skipping feature %s: %s", building_id, explain_validity(poly)
        )
        return None
    return BuildingFootprint(
        building_id=building_id,
        exterior=parsed[0],
        interiors=parsed[1:],
        tags=properties,
    )


def label_buildings(
    buildings: Sequence[BuildingFootprint], table: TagMappingTable
) -> None:
    """Recompute mapped_class in place for all footprints."""
    for b in buildings:
        b.mapped_class = homogenize_label(b.tags, table)
