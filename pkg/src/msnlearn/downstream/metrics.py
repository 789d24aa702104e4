"""Frame-level and per-video F1 metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    """Evaluation summary; ``video_f1`` is None for video-free evaluations."""

    macro_f1: float
    video_f1: float | None
    per_class_f1: list[float]
    n_samples: int

    def to_record(self, evaluation: str, split: str = "test") -> dict:
        return {
            "evaluation": evaluation,
            "split": split,
            "macro_f1": self.macro_f1,
            "video_f1": self.video_f1,
            "per_class_f1": self.per_class_f1,
            "n_samples": self.n_samples,
        }

    def to_json_line(self, evaluation: str, split: str = "test") -> str:
        return json.dumps(self.to_record(evaluation, split))


def confusion_counts(
    predictions: np.ndarray, labels: np.ndarray, n_classes: int
) -> np.ndarray:
    """n_classes x n_classes matrix with rows = true class, cols = predicted."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValueError("predictions and labels must be equal-length 1-D arrays")
    if predictions.size == 0:
        raise ValueError("cannot compute metrics over zero samples")
    if (predictions < 0).any() or (predictions >= n_classes).any():
        raise ValueError("prediction class id out of range")
    if (labels < 0).any() or (labels >= n_classes).any():
        raise ValueError("label class id out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def per_class_f1(
    predictions: np.ndarray, labels: np.ndarray, n_classes: int,
    class_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """F1 per class over ``class_ids`` (default: classes present in either
    predictions or labels). A class with zero precision and recall scores 0."""
    cm = confusion_counts(predictions, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    if class_ids is None:
        present = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
        class_ids = np.flatnonzero(present)
    else:
        class_ids = np.asarray(class_ids, dtype=np.int64)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return f1[class_ids], class_ids


def macro_f1(predictions: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1; classes absent from both predictions
    and labels are excluded from the mean."""
    f1, class_ids = per_class_f1(predictions, labels, n_classes)
    if class_ids.size == 0:
        raise ValueError("no classes present in predictions or labels")
    return float(f1.mean())


def video_f1(
    videos: list[tuple[np.ndarray, np.ndarray]], n_classes: int
) -> float:
    """Mean over videos of macro F1 restricted to classes present in that
    video's ground truth."""
    if len(videos) == 0:
        raise ValueError("need at least one video")
    scores = []
    for predictions, labels in videos:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("a video must contain at least one frame")
        present = np.unique(labels)
        f1, _ = per_class_f1(predictions, labels, n_classes, class_ids=present)
        scores.append(float(f1.mean()))
    return float(np.mean(scores))


def write_metrics(
    path, report: MetricsReport, evaluation: str, split: str = "test"
) -> None:
    """Append the machine-readable record and rewrite the readable table."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(report.to_json_line(evaluation, split) + "\n")
    txt = path.with_suffix(".txt")
    lines = [
        f"evaluation: {evaluation} ({split})",
        f"  macro_f1: {report.macro_f1:.5f}",
        f"  video_f1: {'-' if report.video_f1 is None else f'{report.video_f1:.5f}'}",
        f"  per_class_f1: {', '.join(f'{v:.5f}' for v in report.per_class_f1)}",
        f"  n_samples: {report.n_samples}",
        "",
    ]
    with txt.open("a", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
