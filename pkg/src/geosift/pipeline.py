"""Pipeline orchestration: stage sequencing, parameter cache, funnel
report, and threshold sweeps.

Stages run in the fixed order similarity -> detection -> unique
location -> direction -> sightline -> labeled; each consumes only the
survivors of the previous one. All four per-image parameters are cached
for every image that reaches their stage, pass or fail, so thresholds
can later be swept from the cache without re-executing stages.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from . import detfilter, geoindex, sightline
from .evaluation import PredictionVector, compute_metrics, ensemble_mean
from .exif import ExifGpsData, filter_by_direction
from .manifest import (
    FunctionClass,
    ImageRecord,
    Stage,
    Thresholds,
    ValidationError,
)
from .osm import BuildingFootprint
from .simfilter import EmbeddingMatrix, filter_by_similarity

log = logging.getLogger(__name__)

SWEEPABLE = ("t_sim", "t_score", "t_size", "t_dist")


@dataclass
class CacheEntry:
    """Cached per-image parameters and per-stage pass flags."""

    image_id: str
    p_sim: Optional[float] = None
    p_score: Optional[float] = None
    p_size: Optional[float] = None
    p_dist: Optional[float] = None
    building_id: Optional[str] = None
    weak_label: Optional[FunctionClass] = None
    stage_pass: Dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {"image_id": self.image_id}
        for name in ("p_sim", "p_score", "p_size", "p_dist", "building_id"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.weak_label is not None:
            out["weak_label"] = self.weak_label.value
        out["stage_pass"] = self.stage_pass
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "CacheEntry":
        weak = raw.get("weak_label")
        return cls(
            image_id=str(raw["image_id"]),
            p_sim=raw.get("p_sim"),
            p_score=raw.get("p_score"),
            p_size=raw.get("p_size"),
            p_dist=raw.get("p_dist"),
            building_id=raw.get("building_id"),
            weak_label=None if weak is None else FunctionClass.parse(weak),
            stage_pass=dict(raw.get("stage_pass", {})),
        )


@dataclass
class ParameterCache:
    """Append-only cache of one pipeline run, keyed by image_id."""

    thresholds: Thresholds
    max_range: float
    strict: bool
    entries: Dict[str, CacheEntry] = field(default_factory=dict)

    def entry(self, image_id: str) -> CacheEntry:
        if image_id not in self.entries:
            self.entries[image_id] = CacheEntry(image_id=image_id)
        return self.entries[image_id]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"_meta": {
                "thresholds": self.thresholds.to_dict(),
                "max_range": self.max_range,
                "strict": self.strict,
            }}) + "\n")
            for entry in self.entries.values():
                fh.write(json.dumps(entry.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str) -> "ParameterCache":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line for line in (l.strip() for l in fh) if line]
        if not lines:
            raise ValidationError(f"{path}: empty cache file")
        meta_raw = json.loads(lines[0])
        if "_meta" not in meta_raw:
            raise ValidationError(f"{path}: missing cache meta line")
        meta = meta_raw["_meta"]
        cache = cls(
            thresholds=Thresholds.from_dict(meta["thresholds"]),
            max_range=float(meta["max_range"]),
            strict=bool(meta.get("strict", False)),
        )
        for line in lines[1:]:
            entry = CacheEntry.from_dict(json.loads(line))
            cache.entries[entry.image_id] = entry
        return cache

    def requires_rerun(self, parameter: str, value: float) -> bool:
        """A grid point below a lower-bound run threshold (or past
        max_range for t_dist) cannot be answered from this cache."""
        run = getattr(self.thresholds, parameter)
        if parameter == "t_dist":
            return value > self.max_range
        return value < run

    def final_pass_set(self, thresholds: Thresholds) -> Set[str]:
        """Recompute the labeled-stage pass set from cached parameters.

        Uses cached flags for the threshold-free stages (unique
        location, direction) and the cached parameters for the four
        thresholded gates.
        """
        passing: Set[str] = set()
        for entry in self.entries.values():
            if entry.p_sim is None or not _gte(entry.p_sim, thresholds.t_sim, self.strict):
                continue
            if (
                entry.p_score is None
                or entry.p_size is None
                or not _gte(entry.p_score, thresholds.t_score, self.strict)
                or not _gte(entry.p_size, thresholds.t_size, self.strict)
            ):
                continue
            if not entry.stage_pass.get(Stage.UNIQUE_LOCATION.key, False):
                continue
            if not entry.stage_pass.get(Stage.DIRECTION.key, False):
                continue
            if entry.building_id is None or entry.p_dist is None or entry.p_dist > thresholds.t_dist:
                continue
            if entry.weak_label is None:
                continue
            passing.add(entry.image_id)
        return passing


def _gte(value: float, threshold: float, strict: bool) -> bool:
    return value > threshold if strict else value >= threshold


@dataclass
class FunnelRow:
    stage: str
    count: int
    percent: float
    seconds_per_image: Optional[float]


@dataclass
class FunnelReport:
    """Images remaining after each stage, with per-image timing."""

    rows: List[FunnelRow]

    def counts(self) -> List[int]:
        return [row.count for row in self.rows[1:]]

    def format_table(self) -> str:
        out = [f"{'Stage':<18} {'Images':>10} {'% of input':>11} {'s/image':>10}"]
        for row in self.rows:
            timing = f"{row.seconds_per_image:.6f}" if row.seconds_per_image is not None else "-"
            out.append(
                f"{row.stage:<18} {row.count:>10d} {row.percent:>10.4f}% {timing:>10}"
            )
        return "\n".join(out)

    def to_records(self) -> List[dict]:
        return [
            {
                "stage": row.stage,
                "count": row.count,
                "percent": row.percent,
                "seconds_per_image": row.seconds_per_image,
            }
            for row in self.rows
        ]


@dataclass
class StageOutcome:
    survivors: List[ImageRecord]
    processed: int
    skipped: int = 0


def stage_similarity(
    records: List[ImageRecord],
    seeds: EmbeddingMatrix,
    candidates: EmbeddingMatrix,
    t_sim: float,
    cache: Optional[ParameterCache] = None,
) -> StageOutcome:
    """Gate records on maximum seed similarity; records without an
    embedding are skipped with a logged count."""
    by_row = {image_id: i for i, image_id in enumerate(candidates.row_ids)}
    rows = []
    kept_records = []
    skipped = 0
    for record in records:
        row = by_row.get(record.image_id)
        if row is None:
            skipped += 1
            continue
        rows.append(row)
        kept_records.append(record)
    if skipped:
        log.warning("similarity stage: %d record(s) without embeddings skipped", skipped)
    survivors: List[ImageRecord] = []
    if kept_records:
        subset = EmbeddingMatrix(
            data=candidates.data[rows],
            row_ids=[candidates.row_ids[r] for r in rows],
        )
        for record, (_, p_sim, passed) in zip(
            kept_records, filter_by_similarity(subset, seeds, t_sim)
        ):
            record.p_sim = p_sim
            if cache is not None:
                entry = cache.entry(record.image_id)
                entry.p_sim = p_sim
                entry.stage_pass[Stage.SIMILARITY.key] = passed
            if passed:
                record.stage_reached = Stage.SIMILARITY
                survivors.append(record)
    return StageOutcome(survivors=survivors, processed=len(kept_records), skipped=skipped)


def stage_detection(
    records: List[ImageRecord],
    detections_by_id: Dict[str, List],
    t_size: float,
    t_score: float,
    strict: bool = False,
    cache: Optional[ParameterCache] = None,
) -> StageOutcome:
    survivors: List[ImageRecord] = []
    for record in records:
        result = detfilter.filter_by_detection(
            detections_by_id.get(record.image_id, []), t_size, t_score, strict
        )
        if result.p_score is not None:
            record.p_score = result.p_score
            record.p_size = result.p_size
        if cache is not None:
            entry = cache.entry(record.image_id)
            entry.p_score = result.p_score
            entry.p_size = result.p_size
            entry.stage_pass[Stage.DETECTION.key] = result.passed
        if result.passed:
            record.stage_reached = Stage.DETECTION
            survivors.append(record)
    return StageOutcome(survivors=survivors, processed=len(records))


def stage_unique_location(
    records: List[ImageRecord],
    cache: Optional[ParameterCache] = None,
) -> StageOutcome:
    index = geoindex.build_index(records)
    passing = geoindex.unique_location_filter(index)
    survivors = []
    for record in records:
        passed = record.image_id in passing
        if cache is not None:
            cache.entry(record.image_id).stage_pass[Stage.UNIQUE_LOCATION.key] = passed
        if passed:
            record.stage_reached = Stage.UNIQUE_LOCATION
            survivors.append(record)
    return StageOutcome(survivors=survivors, processed=len(records))


def stage_direction(
    records: List[ImageRecord],
    exif_by_id: Dict[str, ExifGpsData],
    cache: Optional[ParameterCache] = None,
) -> StageOutcome:
    passing = filter_by_direction(records, exif_by_id)
    survivors = []
    for record in records:
        passed = record.image_id in passing
        if cache is not None:
            cache.entry(record.image_id).stage_pass[Stage.DIRECTION.key] = passed
        if passed:
            record.stage_reached = Stage.DIRECTION
            survivors.append(record)
    return StageOutcome(survivors=survivors, processed=len(records))


def stage_sightline(
    records: List[ImageRecord],
    index: sightline.BuildingIndex,
    t_dist: float,
    max_range: float = sightline.DEFAULT_MAX_RANGE_M,
    cache: Optional[ParameterCache] = None,
) -> StageOutcome:
    """Assign the line-of-sight building and gate on t_dist.

    The assignment (building_id, p_dist) is cached even when the
    distance gate fails, so t_dist sweeps up to max_range stay
    answerable from the cache.
    """
    survivors = []
    for record in records:
        if record.bearing is None:
            raise ValidationError(f"{record.image_id}: sightline stage needs a bearing")
        ray = sightline.SightRay(
            origin=(record.lat, record.lon),
            bearing=record.bearing,
            max_range=max_range,
        )
        assignment = sightline.reference_building(ray, index)
        passed = False
        if assignment is not None:
            building_id, p_dist = assignment
            record.building_id = building_id
            record.p_dist = p_dist
            passed = p_dist <= t_dist
        if cache is not None:
            entry = cache.entry(record.image_id)
            if assignment is not None:
                entry.building_id, entry.p_dist = assignment
            entry.stage_pass[Stage.SIGHTLINE.key] = passed
        if passed:
            record.stage_reached = Stage.SIGHTLINE
            survivors.append(record)
    return StageOutcome(survivors=survivors, processed=len(records))


def stage_labeled(
    records: List[ImageRecord],
    buildings: Sequence[BuildingFootprint],
    cache: Optional[ParameterCache] = None,
) -> StageOutcome:
    by_id = {b.building_id: b for b in buildings}
    survivors = []
    for record in records:
        building = by_id.get(record.building_id) if record.building_id else None
        label = building.mapped_class if building is not None else None
        if label is not None:
            record.weak_label = label
        if cache is not None:
            entry = cache.entry(record.image_id)
            entry.weak_label = label
            entry.stage_pass[Stage.LABELED.key] = label is not None
        if label is not None:
            record.stage_reached = Stage.LABELED
            survivors.append(record)
    return StageOutcome(survivors=survivors, processed=len(records))


def run_pipeline(
    records: List[ImageRecord],
    seeds: EmbeddingMatrix,
    candidates: EmbeddingMatrix,
    detections_by_id: Dict[str, List],
    exif_by_id: Dict[str, ExifGpsData],
    buildings: Sequence[BuildingFootprint],
    thresholds: Thresholds,
    max_range: float = sightline.DEFAULT_MAX_RANGE_M,
    strict: bool = False,
) -> Tuple[List[ImageRecord], ParameterCache, FunnelReport]:
    """Run all five stages plus the label gate over a manifest.

    Returns the surviving records, the parameter cache covering every
    processed image, and the stage funnel with per-image timing.
    """
    cache = ParameterCache(thresholds=thresholds, max_range=max_range, strict=strict)
    original = len(records)
    rows = [FunnelRow("input", original, 100.0, None)]

    def pct(count: int) -> float:
        return 100.0 * count / original if original else 0.0

    def timed(stage_name: str, func, current: List[ImageRecord]) -> List[ImageRecord]:
        start = time.perf_counter()
        outcome = func(current)
        elapsed = time.perf_counter() - start
        per_image = elapsed / outcome.processed if outcome.processed else None
        rows.append(FunnelRow(stage_name, len(outcome.survivors), pct(len(outcome.survivors)), per_image))
        return outcome.survivors

    building_index = sightline.BuildingIndex(buildings)
    current = list(records)
    current = timed(
        Stage.SIMILARITY.key,
        lambda recs: stage_similarity(recs, seeds, candidates, thresholds.t_sim, cache),
        current,
    )
    current = timed(
        Stage.DETECTION.key,
        lambda recs: stage_detection(
            recs, detections_by_id, thresholds.t_size, thresholds.t_score, strict, cache
        ),
        current,
    )
    current = timed(
        Stage.UNIQUE_LOCATION.key,
        lambda recs: stage_unique_location(recs, cache),
        current,
    )
    current = timed(
        Stage.DIRECTION.key,
        lambda recs: stage_direction(recs, exif_by_id, cache),
        current,
    )
    current = timed(
        Stage.SIGHTLINE.key,
        lambda recs: stage_sightline(recs, building_index, thresholds.t_dist, max_range, cache),
        current,
    )
    current = timed(
        Stage.LABELED.key,
        lambda recs: stage_labeled(recs, buildings, cache),
        current,
    )
    # Backfill labels for assigned images that failed the distance gate,
    # so t_dist can be swept upward (within max_range) from the cache.
    by_building = {b.building_id: b for b in buildings}
    for entry in cache.entries.values():
        if entry.building_id is not None and entry.weak_label is None:
            building = by_building.get(entry.building_id)
            if building is not None:
                entry.weak_label = building.mapped_class
    distinct_buildings = len({r.building_id for r in current if r.building_id})
    log.info(
        "pipeline finished: %d image(s) out, %d distinct building(s) referenced",
        len(current), distinct_buildings,
    )
    return current, cache, FunnelReport(rows=rows)


@dataclass
class SweepPoint:
    value: float
    requires_rerun: bool
    n_images: int
    fraction: Optional[float]
    weighted_f1: Optional[float]


@dataclass
class SweepResult:
    parameter: str
    fixed: Thresholds
    points: List[SweepPoint]

    def format_table(self) -> str:
        out = [f"{self.parameter:>8} {'images':>8} {'fraction':>9} {'F1':>7}"]
        for p in self.points:
            if p.requires_rerun:
                out.append(f"{p.value:>8.4g} {'requires re-run':>27}")
                continue
            frac = f"{p.fraction:.4f}" if p.fraction is not None else "-"
            f1 = f"{p.weighted_f1:.4f}" if p.weighted_f1 is not None else "-"
            out.append(f"{p.value:>8.4g} {p.n_images:>8d} {frac:>9} {f1:>7}")
        return "\n".join(out)

    def to_records(self) -> List[dict]:
        return [
            {
                "parameter": self.parameter,
                "value": p.value,
                "requires_rerun": p.requires_rerun,
                "n_images": p.n_images,
                "fraction": p.fraction,
                "weighted_f1": p.weighted_f1,
            }
            for p in self.points
        ]


def sweep(
    cache: ParameterCache,
    parameter: str,
    grid: Sequence[float],
    fixed: Thresholds,
    predictions_by_image: Dict[str, List[PredictionVector]],
) -> SweepResult:
    """Recompute the final pass set from the cache at each grid value.

    Grid points that would need lower upstream thresholds than the
    cached run (or a longer sightline range) are marked requires_rerun
    instead of silently under-reporting. Fractions are relative to the
    pass set at the fixed thresholds.
    """
    if parameter not in SWEEPABLE:
        raise ValidationError(
            f"unknown sweep parameter {parameter!r}; expected one of {SWEEPABLE}"
        )
    base = cache.final_pass_set(fixed)
    points: List[SweepPoint] = []
    for value in grid:
        thresholds = fixed.replace(**{parameter: value})
        if any(cache.requires_rerun(p, getattr(thresholds, p)) for p in SWEEPABLE):
            points.append(SweepPoint(value, True, 0, None, None))
            continue
        passing = cache.final_pass_set(thresholds)
        fraction = len(passing) / len(base) if base else None
        f1 = _weighted_f1(cache, passing, predictions_by_image)
        points.append(SweepPoint(value, False, len(passing), fraction, f1))
    return SweepResult(parameter=parameter, fixed=fixed, points=points)


def _weighted_f1(
    cache: ParameterCache,
    passing: Set[str],
    predictions_by_image: Dict[str, List[PredictionVector]],
) -> Optional[float]:
    pairs = []
    for image_id in passing:
        entry = cache.entries[image_id]
        preds = predictions_by_image.get(image_id)
        if entry.weak_label is None or not preds:
            continue
        predicted = ensemble_mean(preds).argmax_class()
        pairs.append((entry.weak_label, predicted))
    if not pairs:
        return None
    return compute_metrics(pairs).weighted_f1
