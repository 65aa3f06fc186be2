"""Stage 3: unique location filtering.

Rejects every image whose exact coordinates are shared with any other
image in the stage input. Equality is bit-exact on the parsed float
values; no tolerance merging. A bulk-loaded rectangle tree (shapely
STRtree) avoids the O(n^2) pairwise scan: candidates are pre-selected
by a point query and only those are checked for true equality.
"""

from dataclasses import dataclass
from typing import List, Sequence, Set, Tuple

import numpy as np
from shapely import STRtree, points

from .manifest import ImageRecord


@dataclass
class LocationIndex:
    """Immutable point index over (lat, lon, image_id) entries."""

    lats: np.ndarray
    lons: np.ndarray
    image_ids: List[str]
    tree: STRtree

    def __len__(self) -> int:
        return len(self.image_ids)

    def query_point(self, lat: float, lon: float) -> List[int]:
        """Indices of entries whose bounding box contains (lon, lat)."""
        return list(self.tree.query(points(lon, lat)))


def build_index(records: Sequence[ImageRecord]) -> LocationIndex:
    """Bulk-load a point index; duplicate coordinates are kept."""
    lats = np.array([r.lat for r in records], dtype=np.float64)
    lons = np.array([r.lon for r in records], dtype=np.float64)
    geoms = points(np.column_stack([lons, lats])) if len(records) else []
    return LocationIndex(
        lats=lats,
        lons=lons,
        image_ids=[r.image_id for r in records],
        tree=STRtree(geoms),
    )


def unique_location_filter(index: LocationIndex) -> Set[str]:
    """Image ids whose exact (lat, lon) is shared by no other image.

    Groups of any multiplicity >= 2 are wholly rejected. The result is
    independent of record order.
    """
    n = len(index)
    if n == 0:
        return set()
    # One bulk self-join: candidate pairs by bbox overlap, then exact
    # coordinate equality. Point bboxes only overlap on coincidence,
    # but the equality check keeps the semantics explicit.
    geoms = points(np.column_stack([index.lons, index.lats]))
    left, right = index.tree.query(geoms)
    duplicated = np.zeros(n, dtype=bool)
    mask = (
        (left != right)
        & (index.lats[left] == index.lats[right])
        & (index.lons[left] == index.lons[right])
    )
    duplicated[left[mask]] = True
    return {index.image_ids[i] for i in np.nonzero(~duplicated)[0]}


def unique_location_scan(records: Sequence[ImageRecord]) -> Set[str]:
    """Reference O(n^2)-semantics scan (chunked) for oracle comparison."""
    n = len(records)
    lats = np.array([r.lat for r in records], dtype=np.float64)
    lons = np.array([r.lon for r in records], dtype=np.float64)
    passing: Set[str] = set()
    chunk = 2048
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        eq = (lats[sl, None] == lats[None, :]) & (lons[sl, None] == lons[None, :])
        counts = eq.sum(axis=1)  # includes self
        for offset, count in enumerate(counts):
            if count == 1:
                passing.add(records[start + offset].image_id)
    return passing
