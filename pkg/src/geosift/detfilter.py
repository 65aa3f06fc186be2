"""Stage 2: object detection filtering.

An image passes when a single detection of class house or building is
both large enough (rel_size >= t_size) and confident enough
(score >= t_score). Thresholds are inclusive by default so the stock
t_score=0.3 does not drop score-0.30 detections; pass strict=True for
strict > semantics.
"""

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .manifest import Detection, ValidationError

BUILDING_CLASSES = frozenset({"house", "building"})


@dataclass(frozen=True)
class DetectionResult:
    """Per-image outcome of the detection filter.

    p_score/p_size come from the qualifying building/house detection
    with maximum score, or from the best building/house detection by
    score when none qualifies (needed for sweep caching); both are None
    when no building/house was detected at all.
    """

    p_score: Optional[float]
    p_size: Optional[float]
    passed: bool


def _is_building(det: Detection) -> bool:
    return det.class_name.lower() in BUILDING_CLASSES


def filter_by_detection(
    detections: Sequence[Detection],
    t_size: float,
    t_score: float,
    strict: bool = False,
) -> DetectionResult:
    """Evaluate one image's detection list against both thresholds."""

    def qualifies(det: Detection) -> bool:
        if strict:
            return det.rel_size > t_size and det.score > t_score
        return det.rel_size >= t_size and det.score >= t_score

    buildings = [d for d in detections if _is_building(d)]
    if not buildings:
        return DetectionResult(p_score=None, p_size=None, passed=False)
    qualifying = [d for d in buildings if qualifies(d)]
    best = max(qualifying or buildings, key=lambda d: d.score)
    return DetectionResult(p_score=best.score, p_size=best.rel_size, passed=bool(qualifying))


def read_detections(path: str) -> Dict[str, List[Detection]]:
    """Read a line-delimited detections file keyed by image_id.

    Each line holds {image_id, class_name, score, x0, y0, x1, y1} with
    normalized box corners; rel_size is box area over image area.
    """
    per_image: Dict[str, List[Detection]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                image_id = str(raw["image_id"])
                det = Detection(
                    class_name=str(raw["class_name"]),
                    score=float(raw["score"]),
                    rel_size=_rel_size(raw),
                )
            except (KeyError, TypeError, ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            per_image.setdefault(image_id, []).append(det)
    return per_image


def _rel_size(raw: dict) -> float:
    if "rel_size" in raw:
        return float(raw["rel_size"])
    x0, y0, x1, y1 = (float(raw[k]) for k in ("x0", "y0", "x1", "y1"))
    for name, v in (("x0", x0), ("y0", y0), ("x1", x1), ("y1", y1)):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name}={v} outside [0, 1]")
    if x1 < x0 or y1 < y0:
        raise ValidationError(f"degenerate box ({x0},{y0},{x1},{y1})")
    return (x1 - x0) * (y1 - y0)


def write_detections(per_image: Dict[str, List[Tuple[Detection, Tuple[float, float, float, float]]]], path: str) -> None:
    """Write detections with their normalized boxes, one per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, dets in per_image.items():
            for det, (x0, y0, x1, y1) in dets:
                fh.write(json.dumps({
                    "image_id": image_id,
                    "class_name": det.class_name,
                    "score": det.score,
                    "x0": x0, "y0": y0, "x1": x1, "y1": y1,
                }) + "\n")
