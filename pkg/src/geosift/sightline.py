"""Stage 5: line-of-sight building referencing.

Casts a ray from the camera position along the compass bearing and
assigns the closest intersected building footprint. Geometry runs in a
local equirectangular projection around each ray origin; a bulk-loaded
rectangle tree over footprint bounding boxes pre-selects candidates.

p_dist is the distance from the origin to the first ray/boundary
intersection point (zero when the origin lies inside the footprint).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

from shapely import STRtree
from shapely.geometry import Polygon

from .manifest import FunctionClass, ValidationError, normalize_bearing
from .osm import BuildingFootprint

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371008.8
_DEG = math.pi / 180.0

DEFAULT_MAX_RANGE_M = 500.0


def project_local(
    origin: Tuple[float, float], point: Tuple[float, float]
) -> Tuple[float, float]:
    """Equirectangular projection of (lat, lon) to meters east/north.

    Accurate to well under geotag noise for points within ~10 km of the
    origin.
    """
    lat0, lon0 = origin
    lat, lon = point
    east = (lon - lon0) * math.cos(lat0 * _DEG) * EARTH_RADIUS_M * _DEG
    north = (lat - lat0) * EARTH_RADIUS_M * _DEG
    return east, north


def unproject_local(
    origin: Tuple[float, float], east: float, north: float
) -> Tuple[float, float]:
    """Inverse of project_local; returns (lat, lon)."""
    lat0, lon0 = origin
    lat = lat0 + north / (EARTH_RADIUS_M * _DEG)
    lon = lon0 + east / (EARTH_RADIUS_M * _DEG * math.cos(lat0 * _DEG))
    return lat, lon


@dataclass
class SightRay:
    """Camera position plus compass bearing, with a range cap in meters."""

    origin: Tuple[float, float]  # (lat, lon)
    bearing: float  # degrees clockwise from true north
    max_range: float = DEFAULT_MAX_RANGE_M

    def __post_init__(self) -> None:
        if not self.max_range > 0:
            raise ValidationError(f"max_range {self.max_range} must be > 0")
        self.bearing = normalize_bearing(self.bearing)


class BuildingIndex:
    """Immutable rectangle-tree index over footprint polygons (lon/lat)."""

    def __init__(self, buildings: Sequence[BuildingFootprint]):
        self.buildings = list(buildings)
        geoms = []
        kept = []
        for b in self.buildings:
            try:
                poly = b.polygon()
            except Exception:
                log.warning("skipping degenerate footprint %s", b.building_id)
                continue
            if poly.is_empty:
                log.warning("skipping empty footprint %s", b.building_id)
                continue
            geoms.append(poly)
            kept.append(b)
        self.buildings = kept
        self.tree = STRtree(geoms) if geoms else None
        self._geoms = geoms

    def candidates(self, ray: SightRay) -> List[BuildingFootprint]:
        """Footprints whose bbox overlaps the ray segment's bbox."""
        if self.tree is None:
            return []
        lat0, lon0 = ray.origin
        rad = ray.bearing * _DEG
        end_e = math.sin(rad) * ray.max_range
        end_n = math.cos(rad) * ray.max_range
        lat1, lon1 = unproject_local(ray.origin, end_e, end_n)
        from shapely.geometry import box

        query = box(
            min(lon0, lon1), min(lat0, lat1), max(lon0, lon1), max(lat0, lat1)
        )
        return [self.buildings[i] for i in self.tree.query(query)]


def _ring_local(origin: Tuple[float, float], ring: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    # Footprint rings store (lon, lat); projection wants (lat, lon).
    return [project_local(origin, (lat, lon)) for lon, lat in ring]


def _point_in_ring(x: float, y: float, ring: Sequence[Tuple[float, float]]) -> bool:
    """Even-odd rule; boundary points may land either way (handled by
    the edge-intersection pass, which reports t=0 hits)."""
    inside = False
    n = len(ring)
    for i in range(n - 1):
        x1, y1 = ring[i]
        x2, y2 = ring[i + 1]
        if (y1 > y) != (y2 > y):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x_cross > x:
                inside = not inside
    return inside


def _point_in_polygon_local(
    x: float, y: float, rings: Sequence[Sequence[Tuple[float, float]]]
) -> bool:
    if not _point_in_ring(x, y, rings[0]):
        return False
    for hole in rings[1:]:
        if _point_in_ring(x, y, hole):
            return False
    return True


def _segment_intersections(
    dx: float, dy: float, length: float, a: Tuple[float, float], b: Tuple[float, float]
) -> List[float]:
    """Distances along the ray (from origin, unit direction dx,dy) where
    it meets segment a-b, within [0, length]. Handles collinear overlap
    by reporting the endpoint projections."""
    ax, ay = a
    bx, by = b
    ex, ey = bx - ax, by - ay
    denom = dx * ey - dy * ex
    if denom == 0.0:
        # Parallel; collinear iff origin->a is also parallel to the edge.
        if ax * ey - ay * ex != 0.0:
            return []
        hits = []
        for px, py in (a, b):
            t = px * dx + py * dy
            if 0.0 <= t <= length:
                hits.append(t)
        # Edge may straddle the origin: the near end of the overlap is 0.
        ta = ax * dx + ay * dy
        tb = bx * dx + by * dy
        if min(ta, tb) < 0.0 < max(ta, tb):
            hits.append(0.0)
        return hits
    # Solve origin + t*d = a + u*e.
    t = (ax * ey - ay * ex) / denom
    u = (ax * dy - ay * dx) / denom
    if 0.0 <= u <= 1.0 and 0.0 <= t <= length:
        return [t]
    return []


def ray_polygon_distance(ray: SightRay, footprint: BuildingFootprint) -> Optional[float]:
    """Distance to the first boundary crossing, 0.0 if the origin is
    inside, None if the footprint is out of reach."""
    rings = [_ring_local(ray.origin, footprint.exterior)] + [
        _ring_local(ray.origin, hole) for hole in footprint.interiors
    ]
    rad = ray.bearing * _DEG
    dx, dy = math.sin(rad), math.cos(rad)
    if _point_in_polygon_local(0.0, 0.0, rings):
        return 0.0
    best: Optional[float] = None
    for ring in rings:
        for i in range(len(ring) - 1):
            for t in _segment_intersections(dx, dy, ray.max_range, ring[i], ring[i + 1]):
                if best is None or t < best:
                    best = t
    return best


def reference_building(
    ray: SightRay, index: BuildingIndex
) -> Optional[Tuple[str, float]]:
    """Closest footprint hit by the ray, as (building_id, p_dist meters).

    Ties on distance break deterministically by building_id.
    """
    best: Optional[Tuple[float, str]] = None
    for footprint in index.candidates(ray):
        dist = ray_polygon_distance(ray, footprint)
        if dist is None:
            continue
        key = (dist, footprint.building_id)
        if best is None or key < best:
            best = key
    if best is None:
        return None
    return best[1], best[0]


def filter_by_distance(
    assignments: Dict[str, Tuple[str, float]], t_dist: float
) -> Set[str]:
    """Pass set: assigned images whose p_dist is within t_dist."""
    return {
        image_id
        for image_id, (_, p_dist) in assignments.items()
        if p_dist <= t_dist
    }


def require_labeled(
    assignments: Dict[str, Tuple[str, float]],
    buildings: Sequence[BuildingFootprint],
) -> Dict[str, FunctionClass]:
    """Images whose assigned building carries a class, with that label."""
    by_id = {b.building_id: b for b in buildings}
    out: Dict[str, FunctionClass] = {}
    for image_id, (building_id, _) in assignments.items():
        building = by_id.get(building_id)
        if building is not None and building.mapped_class is not None:
            out[image_id] = building.mapped_class
    return out
