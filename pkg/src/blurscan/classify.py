"""Classifier contract over patch stacks, a deterministic trainable baseline,
and an import path for externally computed predictions.

The baseline is intentionally simple: three hand-crafted stain features from
the whole-core patch (patch 0) and a multinomial logistic model trained by
full-batch gradient descent. It exists to exercise the triage layer end to
end; real models plug in through the prediction CSV import.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, PredictionImportError, TrainingError

NEAR_WHITE = 240          # max-channel at or above this is ignored as background
BROWN_MIN_RB_GAP = 0.15   # (R - B) / 255 must exceed this


def brown_mask(data: np.ndarray) -> np.ndarray:
    """Per-pixel stain predicate: R > G > B, strong R-B gap, not near-white."""
    d = data.astype(np.int16)
    r, g, b = d[..., 0], d[..., 1], d[..., 2]
    return (
        (r > g) & (g > b)
        & ((r - b) / 255.0 > BROWN_MIN_RB_GAP)
        & (d.max(axis=-1) < NEAR_WHITE)
    )


@dataclass(frozen=True)
class FeatureVector:
    """Stain summary of a patch stack; every component lies in [0, 1]."""

    brown_fraction: float
    mean_saturation: float
    heterogeneity: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.brown_fraction, self.mean_saturation, self.heterogeneity]
        )


@dataclass(frozen=True)
class Prediction:
    """Per-scan class probabilities with the confidence scalar used by triage."""

    core_id: str
    repeat: int
    probabilities: tuple[float, ...]

    def __post_init__(self):
        if len(self.probabilities) not in (2, 4):
            raise ParameterError("predictions must have 2 or 4 classes")
        total = sum(self.probabilities)
        if abs(total - 1.0) > 1e-6:
            raise ParameterError(f"probabilities sum to {total}, not 1")
        if any(p < 0 for p in self.probabilities):
            raise ParameterError("probabilities must be nonnegative")

    @property
    def class_count(self) -> int:
        return len(self.probabilities)

    @property
    def predicted_class(self) -> int:
        p = self.probabilities
        return min(i for i in range(len(p)) if p[i] == max(p))

    @property
    def confidence(self) -> float:
        """The per-prediction confidence scalar: the maximum class probability."""
        return max(self.probabilities)


TILE_GRID = 8  # heterogeneity is the tile-wise std of brown fraction on an 8x8 grid


def extract_features(stack) -> FeatureVector:
    """Features from patch 0 (the whole-core downsample) of a PatchStack."""
    patch = np.asarray(stack.patches[0])
    d = patch.astype(np.float64)
    maxc = d.max(axis=-1)
    minc = d.min(axis=-1)
    browns = brown_mask(patch)
    brown_fraction = float(browns.mean())

    non_white = maxc < NEAR_WHITE
    if non_white.any():
        sat = (maxc[non_white] - minc[non_white]) / maxc[non_white]
        mean_saturation = float(sat.mean())
    else:
        mean_saturation = 0.0

    side = patch.shape[0] // TILE_GRID
    tiles = browns[: side * TILE_GRID, : side * TILE_GRID].reshape(
        TILE_GRID, side, TILE_GRID, side
    )
    tile_fracs = tiles.mean(axis=(1, 3))
    heterogeneity = float(tile_fracs.std() / 0.5)
    return FeatureVector(brown_fraction, mean_saturation, heterogeneity)


@dataclass
class BaselineModel:
    """Multinomial logistic model over the 3 features (+ bias)."""

    class_count: int
    weights: np.ndarray                       # (class_count, 4)
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.class_count not in (2, 4):
            raise ParameterError("class_count must be 2 or 4")
        if self.weights.shape != (self.class_count, 4):
            raise ParameterError(
                f"weights must be ({self.class_count}, 4), got {self.weights.shape}"
            )
        if not np.isfinite(self.weights).all():
            raise ParameterError("weights must be finite")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"class_count": self.class_count,
                 "weights": self.weights.tolist(),
                 "training": self.training},
                fh, indent=1,
            )
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "BaselineModel":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(int(d["class_count"]), np.array(d["weights"]), d.get("training", {}))


def _design(features: list[FeatureVector]) -> np.ndarray:
    x = np.stack([f.as_array() for f in features])
    return np.concatenate([x, np.ones((len(features), 1))], axis=1)


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


L2_PENALTY = 1e-4


def train_baseline(features: list[FeatureVector], labels: list[int],
                   class_count: int, epochs: int = 2000, learning_rate: float = 2.0,
                   seed: int = 0) -> BaselineModel:
    """Full-batch gradient descent on L2-penalized multinomial logistic loss.

    Deterministic: weights start at zero, so zero epochs yields uniform
    predictions. The seed is recorded for provenance only.
    """
    if class_count not in (2, 4):
        raise ParameterError("class_count must be 2 or 4")
    if len(features) != len(labels) or not features:
        raise TrainingError("need matching nonempty features and labels")
    labels_arr = np.asarray(labels)
    present = np.unique(labels_arr)
    if present.size < 2:
        raise TrainingError(f"training set contains a single class {present.tolist()}")
    if labels_arr.min() < 0 or labels_arr.max() >= class_count:
        raise TrainingError("labels outside class range")

    x = _design(features)                        # (n, 4)
    onehot = np.eye(class_count)[labels_arr]     # (n, C)
    w = np.zeros((class_count, 4))
    n = len(features)
    loss = float(np.log(class_count))
    for _ in range(epochs):
        p = _softmax(x @ w.T)                    # (n, C)
        grad = (p - onehot).T @ x / n + L2_PENALTY * w
        w -= learning_rate * grad
        loss = float(
            -np.log(np.clip(p[np.arange(n), labels_arr], 1e-300, None)).mean()
            + 0.5 * L2_PENALTY * (w * w).sum()
        )
    return BaselineModel(
        class_count, w,
        training={"epochs": epochs, "learning_rate": learning_rate,
                  "seed": seed, "final_loss": loss},
    )


def predict(model: BaselineModel, stack, core_id: str | None = None,
            repeat: int = 0) -> Prediction:
    """Softmax of linear scores over the stack's features."""
    f = extract_features(stack)
    return predict_features(model, f, core_id=core_id or stack.core_id, repeat=repeat)


def predict_features(model: BaselineModel, f: FeatureVector, core_id: str = "",
                     repeat: int = 0) -> Prediction:
    x = np.concatenate([f.as_array(), [1.0]])
    p = _softmax(model.weights @ x)
    p = p / p.sum()
    return Prediction(core_id, repeat, tuple(float(v) for v in p))


# ---------------------------------------------------------------------------
# Prediction CSV: core_id,repeat,p0,p1[,p2,p3]
# ---------------------------------------------------------------------------

def export_predictions(predictions: list[Prediction], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not predictions:
        raise ParameterError("no predictions to export")
    k = predictions[0].class_count
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["core_id", "repeat"] + [f"p{i}" for i in range(k)])
        for p in predictions:
            wr.writerow([p.core_id, p.repeat] + [repr(v) for v in p.probabilities])
    return path


def import_predictions(path: str | Path, class_count: int) -> list[Prediction]:
    """Load and validate an external prediction CSV.

    Probability rows whose sum falls within [0.99, 1.01] are renormalized;
    anything else is rejected with its row number.
    """
    if class_count not in (2, 4):
        raise ParameterError("class_count must be 2 or 4")
    expected = ["core_id", "repeat"] + [f"p{i}" for i in range(class_count)]
    out: list[Prediction] = []
    seen: set[tuple[str, int]] = set()
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PredictionImportError("empty prediction file", row=0)
        if [h.strip() for h in header] != expected:
            raise PredictionImportError(
                f"bad header {header!r}, expected {expected!r}", row=1
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(expected):
                raise PredictionImportError(
                    f"expected {len(expected)} fields, got {len(rec)}", row=lineno
                )
            core_id = rec[0]
            try:
                repeat = int(rec[1])
                probs = np.array([float(v) for v in rec[2:]])
            except ValueError as exc:
                raise PredictionImportError(str(exc), row=lineno)
            if (probs < 0).any():
                raise PredictionImportError("negative probability", row=lineno)
            total = probs.sum()
            if not (0.99 <= total <= 1.01):
                raise PredictionImportError(
                    f"probabilities sum to {total:.6f}, outside [0.99, 1.01]",
                    row=lineno,
                )
            probs = probs / total
            key = (core_id, repeat)
            if key in seen:
                raise PredictionImportError(
                    f"duplicate (core_id, repeat) = {key}", row=lineno
                )
            seen.add(key)
            out.append(Prediction(core_id, repeat, tuple(float(v) for v in probs)))
    return out
