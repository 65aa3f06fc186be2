"""Metrics, ensembling, and human vote aggregation.

Class order is fixed as (commercial, other, residential) everywhere a
probability vector appears; argmax ties break to the lowest index in
that order.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .manifest import FunctionClass, ValidationError

CLASS_ORDER = (
    FunctionClass.COMMERCIAL,
    FunctionClass.OTHER,
    FunctionClass.RESIDENTIAL,
)

_PROB_KEYS = ("p_com", "p_oth", "p_res")


@dataclass
class PredictionVector:
    """One model's class probabilities for one image."""

    image_id: str
    model_id: str
    probs: Tuple[float, float, float]  # (commercial, other, residential)

    def __post_init__(self) -> None:
        if any(p < 0 for p in self.probs):
            raise ValidationError(f"{self.image_id}: negative probability")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-6:
            raise ValidationError(
                f"{self.image_id}: probabilities sum to {total}, not 1"
            )

    def argmax_class(self) -> FunctionClass:
        best = max(range(3), key=lambda i: (self.probs[i], -i))
        return CLASS_ORDER[best]


def ensemble_mean(predictions: Sequence[PredictionVector]) -> PredictionVector:
    """Elementwise mean of several models' vectors for one image.

    Renormalizes only if accumulated drift exceeds 1e-6.
    """
    if not predictions:
        raise ValidationError("cannot ensemble an empty prediction list")
    image_id = predictions[0].image_id
    if any(p.image_id != image_id for p in predictions):
        raise ValidationError("ensemble input mixes image ids")
    n = len(predictions)
    mean = [
        math.fsum(p.probs[i] for p in predictions) / n for i in range(3)
    ]
    total = sum(mean)
    if abs(total - 1.0) > 1e-6:
        mean = [m / total for m in mean]
    return PredictionVector(
        image_id=image_id, model_id="ensemble", probs=tuple(mean)
    )


def read_predictions(path: str) -> Dict[str, List[PredictionVector]]:
    """Read {image_id, model_id, p_com, p_oth, p_res} lines keyed by image."""
    per_image: Dict[str, List[PredictionVector]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                vec = PredictionVector(
                    image_id=str(raw["image_id"]),
                    model_id=str(raw.get("model_id", "default")),
                    probs=tuple(float(raw[k]) for k in _PROB_KEYS),
                )
            except (KeyError, TypeError, ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            per_image.setdefault(vec.image_id, []).append(vec)
    return per_image


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False  # class absent from truth and predictions


@dataclass
class MetricsReport:
    """Per-class one-vs-rest metrics plus support-weighted averages."""

    per_class: Dict[FunctionClass, ClassMetrics]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    total: int

    def format_table(self) -> str:
        rows = [f"{'Class':<12} {'F1':>7} {'Prec':>7} {'Rec':>7} {'Support':>8}"]
        for cls in CLASS_ORDER:
            m = self.per_class[cls]
            rows.append(
                f"{cls.value:<12} {m.f1:>7.4f} {m.precision:>7.4f} "
                f"{m.recall:>7.4f} {m.support:>8d}"
            )
        rows.append(
            f"{'avg':<12} {self.weighted_f1:>7.4f} {self.weighted_precision:>7.4f} "
            f"{self.weighted_recall:>7.4f} {self.total:>8d}"
        )
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "per_class": {
                cls.value: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for cls, m in self.per_class.items()
            },
            "weighted": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
            "total": self.total,
        }


def compute_metrics(
    pairs: Sequence[Tuple[FunctionClass, FunctionClass]]
) -> MetricsReport:
    """Standard per-class precision/recall/F1 over (truth, predicted) pairs.

    F1 = 2PR/(P+R), defined as 0 when P+R = 0; averages are weighted by
    true-class support.
    """
    if not pairs:
        raise ValidationError("compute_metrics requires at least one pair")
    per_class: Dict[FunctionClass, ClassMetrics] = {}
    for cls in CLASS_ORDER:
        tp = sum(1 for t, p in pairs if t == cls and p == cls)
        fp = sum(1 for t, p in pairs if t != cls and p == cls)
        fn = sum(1 for t, p in pairs if t == cls and p != cls)
        support = tp + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / support if support else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        per_class[cls] = ClassMetrics(
            precision=precision,
            recall=recall,
            f1=f1,
            support=support,
            degenerate=(support == 0 and fp == 0),
        )
    total_support = sum(m.support for m in per_class.values())
    def weighted(attr: str) -> float:
        return sum(
            getattr(m, attr) * m.support for m in per_class.values()
        ) / total_support
    return MetricsReport(
        per_class=per_class,
        weighted_precision=weighted("precision"),
        weighted_recall=weighted("recall"),
        weighted_f1=weighted("f1"),
        total=len(pairs),
    )


class Vote(Enum):
    YES = "yes"
    UNSURE = "unsure"
    NO = "no"


@dataclass(frozen=True)
class VoteRecord:
    image_id: str
    shown_label: FunctionClass
    vote: Vote
    corrected_label: Optional[FunctionClass] = None

    def __post_init__(self) -> None:
        if self.vote is Vote.NO and self.corrected_label is None:
            raise ValidationError(
                f"{self.image_id}: 'no' vote requires a corrected label"
            )
        if self.vote is not Vote.NO and self.corrected_label is not None:
            raise ValidationError(
                f"{self.image_id}: corrected label only allowed on 'no' votes"
            )


class OutcomeKind(Enum):
    CONFIRMED_ORIGINAL = "confirmed_original"
    CONFIRMED_NEW = "confirmed_new"
    INCONSISTENT = "inconsistent"


@dataclass(frozen=True)
class VoteOutcome:
    image_id: str
    shown_label: FunctionClass
    kind: OutcomeKind
    new_label: Optional[FunctionClass] = None
    all_unsure: bool = False  # flagged separately, treated as inconsistent


def read_votes(path: str) -> List[VoteRecord]:
    records: List[VoteRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                corrected = raw.get("corrected_label")
                records.append(VoteRecord(
                    image_id=str(raw["image_id"]),
                    shown_label=FunctionClass.parse(raw["shown_label"]),
                    vote=Vote(raw["vote"]),
                    corrected_label=None if corrected is None else FunctionClass.parse(corrected),
                ))
            except (KeyError, TypeError, ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return records


def aggregate_votes(votes: Iterable[VoteRecord]) -> Dict[str, VoteOutcome]:
    """Collapse exactly three votes per image into one outcome.

    Unanimous yes confirms the shown label; unanimous no with a common
    corrected label confirms the new one; everything else, including
    three unsure votes, is inconsistent (three-unsure is flagged).
    """
    grouped: Dict[str, List[VoteRecord]] = {}
    for vote in votes:
        grouped.setdefault(vote.image_id, []).append(vote)
    outcomes: Dict[str, VoteOutcome] = {}
    for image_id, group in grouped.items():
        if len(group) != 3:
            raise ValidationError(
                f"image {image_id} has {len(group)} votes, expected 3"
            )
        shown = group[0].shown_label
        if any(v.shown_label != shown for v in group):
            raise ValidationError(f"image {image_id}: inconsistent shown labels")
        kinds = [v.vote for v in group]
        if all(k is Vote.YES for k in kinds):
            outcomes[image_id] = VoteOutcome(image_id, shown, OutcomeKind.CONFIRMED_ORIGINAL)
        elif all(k is Vote.NO for k in kinds) and len({v.corrected_label for v in group}) == 1:
            outcomes[image_id] = VoteOutcome(
                image_id, shown, OutcomeKind.CONFIRMED_NEW,
                new_label=group[0].corrected_label,
            )
        else:
            outcomes[image_id] = VoteOutcome(
                image_id, shown, OutcomeKind.INCONSISTENT,
                all_unsure=all(k is Vote.UNSURE for k in kinds),
            )
    return outcomes


@dataclass
class AccuracyReport:
    """Per-class and overall label correctness over clear-vote images."""

    per_class: Dict[FunctionClass, Tuple[int, int]]  # (confirmed, relabeled)
    no_clear_votes: bool

    def class_correct_fraction(self, cls: FunctionClass) -> Optional[float]:
        confirmed, relabeled = self.per_class.get(cls, (0, 0))
        total = confirmed + relabeled
        return confirmed / total if total else None

    def overall_accuracy(self) -> Optional[float]:
        confirmed = sum(c for c, _ in self.per_class.values())
        total = sum(c + r for c, r in self.per_class.values())
        return confirmed / total if total else None

    def format_table(self) -> str:
        if self.no_clear_votes:
            return "no clear votes"
        rows = [f"{'Class':<12} {'Correct':>8} {'Wrong':>6} {'Accuracy':>9}"]
        for cls in CLASS_ORDER:
            confirmed, relabeled = self.per_class.get(cls, (0, 0))
            frac = self.class_correct_fraction(cls)
            shown = f"{100 * frac:.1f}%" if frac is not None else "-"
            rows.append(f"{cls.value:<12} {confirmed:>8d} {relabeled:>6d} {shown:>9}")
        overall = self.overall_accuracy()
        rows.append(f"{'overall':<12} {'':>8} {'':>6} {100 * overall:>8.1f}%")
        return "\n".join(rows)


def osm_accuracy_report(outcomes: Dict[str, VoteOutcome]) -> AccuracyReport:
    """Fractions of confirmed vs relabeled images per shown class.

    Restricted to clear votes (confirmed original or confirmed new).
    """
    per_class: Dict[FunctionClass, Tuple[int, int]] = {}
    any_clear = False
    for outcome in outcomes.values():
        if outcome.kind is OutcomeKind.INCONSISTENT:
            continue
        any_clear = True
        confirmed, relabeled = per_class.get(outcome.shown_label, (0, 0))
        if outcome.kind is OutcomeKind.CONFIRMED_ORIGINAL:
            confirmed += 1
        else:
            relabeled += 1
        per_class[outcome.shown_label] = (confirmed, relabeled)
    return AccuracyReport(per_class=per_class, no_clear_votes=not any_clear)


def validated_subset(outcomes: Dict[str, VoteOutcome]) -> Dict[str, FunctionClass]:
    """Image -> resolved gold label over clear-vote images only."""
    subset: Dict[str, FunctionClass] = {}
    for outcome in outcomes.values():
        if outcome.kind is OutcomeKind.CONFIRMED_ORIGINAL:
            subset[outcome.image_id] = outcome.shown_label
        elif outcome.kind is OutcomeKind.CONFIRMED_NEW:
            subset[outcome.image_id] = outcome.new_label
    return subset
