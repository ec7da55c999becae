"""Classification scoring: confusion matrix, per-class accuracy, overall and
average accuracy, chance-corrected agreement, JSON reports, portable-pixmap
classification maps, and mean/std aggregation across seeded runs."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Fixed rendering palette: index 0 (unlabeled) is black, classes 1..22 follow.
PALETTE: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (105, 225, 155),
)
MAX_RENDERABLE_CLASSES = len(PALETTE) - 1


@dataclass
class EvalReport:
    confusion: np.ndarray                  # (K, K) counts, rows = truth
    per_class_accuracy: list[float | None]  # None when a class has no samples
    overall_accuracy: float
    average_accuracy: float
    kappa: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": self.per_class_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "average_accuracy": self.average_accuracy,
            "kappa": self.kappa,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        return cls(
            confusion=np.asarray(payload["confusion"], dtype=np.int64),
            per_class_accuracy=list(payload["per_class_accuracy"]),
            overall_accuracy=float(payload["overall_accuracy"]),
            average_accuracy=float(payload["average_accuracy"]),
            kappa=float(payload["kappa"]),
            sample_count=int(payload["sample_count"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(predictions, truths, class_count: int) -> EvalReport:
    """Score 0-based predicted class indices against 0-based truths.

    Classes absent from the truth set get an undefined per-class accuracy and
    are excluded from the average accuracy with a warning.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape or predictions.ndim != 1:
        raise ValueError(
            f"predictions {predictions.shape} and truths {truths.shape} must be "
            "equal-length vectors"
        )
    if predictions.size == 0:
        raise ValueError("cannot evaluate zero samples")
    for name, arr in (("predictions", predictions), ("truths", truths)):
        if arr.min() < 0 or arr.max() >= class_count:
            raise ValueError(
                f"{name} must lie in [0, {class_count}), found "
                f"[{arr.min()}, {arr.max()}]"
            )
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(confusion, (truths, predictions), 1)
    total = int(confusion.sum())
    overall = float(np.trace(confusion)) / total

    per_class: list[float | None] = []
    recalls = []
    missing = []
    for idx in range(class_count):
        row = confusion[idx].sum()
        if row == 0:
            per_class.append(None)
            missing.append(idx)
        else:
            recall = float(confusion[idx, idx]) / float(row)
            per_class.append(recall)
            recalls.append(recall)
    if missing:
        warnings.warn(
            f"classes {missing} absent from the test set; excluded from the "
            "average accuracy",
            stacklevel=2,
        )
    average = float(np.mean(recalls))

    row_marginals = confusion.sum(axis=1) / total
    col_marginals = confusion.sum(axis=0) / total
    expected = float(np.dot(row_marginals, col_marginals))
    if expected >= 1.0:
        kappa = 1.0 if overall == 1.0 else 0.0
    else:
        kappa = (overall - expected) / (1.0 - expected)
    return EvalReport(
        confusion=confusion,
        per_class_accuracy=per_class,
        overall_accuracy=overall,
        average_accuracy=average,
        kappa=kappa,
        sample_count=total,
    )


def emit_map(raster: np.ndarray, path) -> Path:
    """Render a class raster (0 = unlabeled = black) as a binary P6 pixmap."""
    raster = np.asarray(raster, dtype=np.int64)
    if raster.ndim != 2:
        raise ValueError(f"raster must be 2-D, got shape {raster.shape}")
    if raster.min() < 0 or raster.max() > MAX_RENDERABLE_CLASSES:
        raise ValueError(
            f"raster classes must lie in [0, {MAX_RENDERABLE_CLASSES}], found "
            f"[{raster.min()}, {raster.max()}]"
        )
    height, width = raster.shape
    lookup = np.asarray(PALETTE, dtype=np.uint8)
    pixels = lookup[raster]
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return path


def summarize_reports(reports: list[EvalReport]) -> dict:
    """Mean and standard deviation of the headline metrics across seeds."""
    if not reports:
        raise ValueError("no reports to summarize")

    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        }

    return {
        "runs": len(reports),
        "overall_accuracy": stats([r.overall_accuracy for r in reports]),
        "average_accuracy": stats([r.average_accuracy for r in reports]),
        "kappa": stats([r.kappa for r in reports]),
    }
