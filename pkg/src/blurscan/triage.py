"""Three-repeat aggregation and triage evaluation.

Aggregation methods over a specimen's three scans:

- all-scans: every prediction stands alone (the 3N evaluation),
- max-ci: keep the repeat with the highest confidence,
- weighted-ci: confidence-weighted mean of the predicted class indices,
  normalized by the total confidence and rounded half-up. The unnormalized
  reading (sum of class * confidence, no division) is available behind a
  flag; it can exceed the class range and is clamped.

Decisions below the confidence threshold become indeterminate and are
excluded from accuracy; sweeping the threshold yields the
accuracy-vs-indeterminate trade-off curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .classify import Prediction
from .errors import AggregationError, MetricError, ParameterError

METHOD_ALL_SCANS = "all-scans"
METHOD_MAX_CI = "max-ci"
METHOD_WEIGHTED_CI = "weighted-ci"
METHODS = (METHOD_ALL_SCANS, METHOD_MAX_CI, METHOD_WEIGHTED_CI)

REPEATS = 3
DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(0, 101) * 0.01, 2).tolist())
DEFAULT_TARGET_INDETERMINATE = 0.15


@dataclass(frozen=True)
class RepeatSet:
    """The three predictions of one specimen, with its true label if known."""

    core_id: str
    predictions: tuple[Prediction, Prediction, Prediction]
    true_label: int | None = None

    def __post_init__(self):
        if len(self.predictions) != REPEATS:
            raise ParameterError(f"need exactly {REPEATS} predictions")
        repeats = sorted(p.repeat for p in self.predictions)
        if repeats != [0, 1, 2]:
            raise ParameterError(f"repeat indices must be {{0,1,2}}, got {repeats}")
        counts = {p.class_count for p in self.predictions}
        if len(counts) != 1:
            raise ParameterError(f"inconsistent class counts {counts}")

    @property
    def class_count(self) -> int:
        return self.predictions[0].class_count

    def by_repeat(self) -> list[Prediction]:
        return sorted(self.predictions, key=lambda p: p.repeat)


@dataclass(frozen=True)
class TriageDecision:
    """An aggregated (or single-scan) class decision, thresholdable later."""

    core_id: str
    method: str
    decided_class: int
    confidence: float
    positive_probability: float | None = None  # 2-class score for ROC
    threshold: float | None = None
    indeterminate: bool = False

    def thresholded(self, theta: float) -> "TriageDecision":
        return replace(self, threshold=theta, indeterminate=self.confidence < theta)


def binarize_label(label: int) -> int:
    """4-class score to 2-class: {0,1} -> 0 (negative), {2,3} -> 1 (positive)."""
    if label not in (0, 1, 2, 3):
        raise ParameterError(f"label {label!r} is not a 4-class score")
    return 0 if label <= 1 else 1


def binarize_prediction(p: Prediction) -> Prediction:
    """Merge 4-class probabilities: p_neg = p0 + p1, p_pos = p2 + p3."""
    if p.class_count != 4:
        raise ParameterError("binarize expects a 4-class prediction")
    neg = p.probabilities[0] + p.probabilities[1]
    pos = p.probabilities[2] + p.probabilities[3]
    return Prediction(p.core_id, p.repeat, (neg, pos))


def binarize_repeat_set(rs: RepeatSet) -> RepeatSet:
    preds = tuple(binarize_prediction(p) for p in rs.predictions)
    label = None if rs.true_label is None else binarize_label(rs.true_label)
    return RepeatSet(rs.core_id, preds, label)


def _positive_probability(p: Prediction) -> float | None:
    return p.probabilities[1] if p.class_count == 2 else None


def aggregate(rs: RepeatSet, method: str,
              normalize_weighted: bool = True) -> list[TriageDecision]:
    """Aggregate one repeat set; all-scans yields three decisions, the other
    methods one."""
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    preds = rs.by_repeat()
    if method == METHOD_ALL_SCANS:
        return [
            TriageDecision(rs.core_id, method, p.predicted_class, p.confidence,
                           _positive_probability(p))
            for p in preds
        ]
    if method == METHOD_MAX_CI:
        best = max(preds, key=lambda p: (p.confidence, -p.repeat))
        return [TriageDecision(rs.core_id, method, best.predicted_class,
                               best.confidence, _positive_probability(best))]
    # weighted-ci
    cis = np.array([p.confidence for p in preds])
    scores = np.array([p.predicted_class for p in preds], dtype=np.float64)
    total = float(cis.sum())
    if total <= 0:
        raise AggregationError(f"zero total confidence for {rs.core_id}")
    weighted = float((scores * cis).sum())
    value = weighted / total if normalize_weighted else weighted
    decided = int(np.floor(value + 0.5))
    decided = min(max(decided, 0), rs.class_count - 1)
    confidence = float(cis.mean())
    pos = None
    if rs.class_count == 2:
        pos = float(sum(p.probabilities[1] * p.confidence for p in preds) / total)
    return [TriageDecision(rs.core_id, method, decided, confidence, pos)]


def aggregate_all(sets: Sequence[RepeatSet], method: str,
                  normalize_weighted: bool = True) -> list[TriageDecision]:
    out: list[TriageDecision] = []
    for rs in sets:
        out.extend(aggregate(rs, method, normalize_weighted))
    return out


def apply_threshold(decisions: Sequence[TriageDecision], theta: float
                    ) -> tuple[list[TriageDecision], float]:
    """Mark decisions below theta indeterminate; returns (determinate, fraction)."""
    if not (0 <= theta <= 1):
        raise ParameterError("threshold must lie in [0, 1]")
    if not decisions:
        raise ParameterError("no decisions to threshold")
    marked = [d.thresholded(theta) for d in decisions]
    determinate = [d for d in marked if not d.indeterminate]
    fraction = 1.0 - len(determinate) / len(marked)
    return determinate, fraction


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class SweepPoint:
    threshold: float
    accuracy: float | None        # None when no decision stays determinate
    indeterminate_fraction: float


@dataclass
class SweepCurve:
    points: list[SweepPoint]
    target_rate: float
    theta_at_target: float | None  # smallest grid theta reaching the target

    def __post_init__(self):
        fracs = [p.indeterminate_fraction for p in self.points]
        if any(b < a - 1e-12 for a, b in zip(fracs, fracs[1:])):
            raise ParameterError("indeterminate fraction must be nondecreasing")


def _accuracy(decisions: Sequence[TriageDecision],
              truth: dict[str, int]) -> float | None:
    if not decisions:
        return None
    correct = sum(1 for d in decisions if truth[d.core_id] == d.decided_class)
    return correct / len(decisions)


def sweep(decisions: Sequence[TriageDecision], truth: dict[str, int],
          grid: Sequence[float] = DEFAULT_THRESHOLD_GRID,
          target_rate: float = DEFAULT_TARGET_INDETERMINATE) -> SweepCurve:
    """Accuracy over determinate decisions and indeterminate fraction per
    threshold, plus the operating point reaching the target indeterminate rate."""
    if not decisions:
        raise ParameterError("no decisions to sweep")
    missing = [d.core_id for d in decisions if d.core_id not in truth]
    if missing:
        raise ParameterError(f"decisions without truth labels: {missing[:5]}")
    points = []
    theta_at_target = None
    for theta in grid:
        determinate, fraction = apply_threshold(decisions, theta)
        points.append(SweepPoint(float(theta), _accuracy(determinate, truth), fraction))
        if theta_at_target is None and fraction >= target_rate:
            theta_at_target = float(theta)
    return SweepCurve(points, target_rate, theta_at_target)


def consistency(sets: Sequence[RepeatSet]) -> tuple[dict[str, float], float]:
    """Per-core fraction of the three predicted classes equal to their mode
    (all distinct -> 1/3), and the mean over cores."""
    if not sets:
        raise ParameterError("no repeat sets")
    per_core: dict[str, float] = {}
    for rs in sets:
        classes = [p.predicted_class for p in rs.by_repeat()]
        top = max(classes.count(c) for c in set(classes))
        per_core[rs.core_id] = top / REPEATS
    overall = float(np.mean(list(per_core.values())))
    return per_core, overall


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = prediction

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ParameterError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ParameterError("confusion counts must be nonnegative")

    @property
    def accuracy(self) -> float:
        total = int(self.counts.sum())
        if total == 0:
            raise MetricError("confusion matrix is empty")
        return float(np.trace(self.counts) / total)


def confusion(decisions: Sequence[TriageDecision], truth: dict[str, int],
              class_count: int) -> ConfusionMatrix:
    """Counts over determinate decisions; truth rows, prediction columns."""
    determinate = [d for d in decisions if not d.indeterminate]
    if not determinate:
        raise MetricError("no determinate decisions; confusion matrix undefined")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    for d in determinate:
        t = truth[d.core_id]
        if not (0 <= t < class_count and 0 <= d.decided_class < class_count):
            raise ParameterError(
                f"label/prediction outside {class_count}-class range for {d.core_id}"
            )
        counts[t, d.decided_class] += 1
    return ConfusionMatrix(counts)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def __post_init__(self):
        self.fpr = np.asarray(self.fpr, dtype=np.float64)
        self.tpr = np.asarray(self.tpr, dtype=np.float64)
        if np.any(np.diff(self.fpr) < -1e-12) or np.any(np.diff(self.tpr) < -1e-12):
            raise ParameterError("ROC points must be monotone nondecreasing")
        if not (0 <= self.auc <= 1 + 1e-12):
            raise ParameterError("AUC must lie in [0, 1]")


def roc_auc(truths: Sequence[int], scores: Sequence[float]) -> RocCurve:
    """ROC from positive-class scores, grouping tied scores into single steps;
    AUC by the trapezoid rule (equals pairwise concordance with ties at 1/2)."""
    truths = np.asarray(truths)
    scores = np.asarray(scores, dtype=np.float64)
    if truths.shape != scores.shape or truths.ndim != 1 or len(truths) == 0:
        raise ParameterError("need matching nonempty truth and score vectors")
    if not set(np.unique(truths)) <= {0, 1}:
        raise ParameterError("truths must be binary (0 negative, 1 positive)")
    pos = int((truths == 1).sum())
    neg = int((truths == 0).sum())
    if pos == 0 or neg == 0:
        raise MetricError("ROC needs both classes present among the truths")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truths = truths[order]
    tps = np.cumsum(sorted_truths == 1)
    fps = np.cumsum(sorted_truths == 0)
    # one step per distinct score value
    distinct = np.concatenate([np.diff(sorted_scores) != 0, [True]])
    tpr = np.concatenate([[0.0], tps[distinct] / pos])
    fpr = np.concatenate([[0.0], fps[distinct] / neg])
    auc = float(np.trapz(tpr, fpr))
    return RocCurve(fpr, tpr, auc)
