"""Annotation-efficiency harness: probes trained on video-level subsamples.

For each fraction, whole train videos are sampled without replacement
(never splitting a video); the probe is retrained per repetition and test
macro F1 is aggregated as mean and standard deviation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dataio import DatasetManifest
from ..exceptions import DegenerateSplitError
from ..rng import named_stream
from ..validation import check_fraction
from ..views import round_half_away
from .features import FeatureSequence, extract_features
from .probe import LinearProbeClassifier, ProbeConfig, evaluate_predictions, split_videos, stack_split


@dataclass
class LowshotRow:
    fraction: float
    mean_f1: float
    std_f1: float
    f1_values: list[float]


def sample_video_ids(video_ids: list[str], fraction: float, seed: int) -> list[str]:
    """round(fraction * n) whole videos, uniform without replacement."""
    check_fraction(fraction, "fraction")
    n = round_half_away(fraction * len(video_ids))
    if n == 0:
        raise DegenerateSplitError(
            f"fraction {fraction} of {len(video_ids)} videos rounds to zero"
        )
    if n >= len(video_ids):
        return list(video_ids)
    rng = named_stream(seed, "lowshot-sample")
    chosen = np.sort(rng.choice(len(video_ids), size=n, replace=False))
    return [video_ids[i] for i in chosen]


def lowshot_split(
    manifest: DatasetManifest, fraction: float, repetition_seed: int
) -> DatasetManifest:
    """Sub-manifest containing a video-level sample at the given fraction."""
    chosen = sample_video_ids(manifest.video_ids(), fraction, repetition_seed)
    return manifest.subset_videos(chosen)


def curve_from_features(
    features: list[FeatureSequence],
    fractions: list[float],
    repetitions: int,
    probe_config: ProbeConfig,
    seed: int,
    n_classes: int | None = None,
) -> list[LowshotRow]:
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if n_classes is None:
        n_classes = int(max(f.labels.max() for f in features)) + 1
    train_ids, val_ids, test_ids = split_videos([f.video_id for f in features], seed)
    x_va, y_va, _ = stack_split(features, val_ids)
    x_te, y_te, _ = stack_split(features, test_ids)

    rows: list[LowshotRow] = []
    for fraction in fractions:
        values: list[float] = []
        for rep in range(repetitions):
            cell_seed = int(
                named_stream(seed, "lowshot", f"{fraction}", rep).integers(2 ** 62)
            )
            sub_train = sample_video_ids(train_ids, fraction, cell_seed)
            x_tr, y_tr, _ = stack_split(features, sub_train)
            clf = LinearProbeClassifier(
                optimizer=probe_config.optimizer,
                learning_rate=probe_config.learning_rate,
                weight_decay=probe_config.weight_decay,
                batch_size=probe_config.batch_size,
                epochs=probe_config.epochs,
                seed=cell_seed,
            )
            clf.fit(x_tr, y_tr, eval_set=(x_va, y_va) if len(y_va) else None)
            report = evaluate_predictions(clf.predict(x_te), y_te, n_classes)
            values.append(report.macro_f1)
        rows.append(LowshotRow(
            fraction=float(fraction),
            mean_f1=float(np.mean(values)),
            std_f1=float(np.std(values)),
            f1_values=values,
        ))
    return rows


def lowshot_curve(
    checkpoint_path: Path | str,
    manifest: DatasetManifest,
    fractions: list[float],
    repetitions: int,
    probe_config: ProbeConfig,
    seed: int,
    cache_dir: Path | str | None = None,
) -> list[LowshotRow]:
    """Extract frozen features, then probe at each (fraction, repetition)."""
    features = extract_features(checkpoint_path, manifest, cache_dir=cache_dir)
    return curve_from_features(
        features, fractions, repetitions, probe_config, seed,
        n_classes=manifest.n_classes,
    )


def write_lowshot_csv(rows: list[LowshotRow], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "mean_macro_f1", "std_macro_f1", "runs"])
        for row in rows:
            writer.writerow([
                row.fraction,
                f"{row.mean_f1:.6f}",
                f"{row.std_f1:.6f}",
                "|".join(f"{v:.6f}" for v in row.f1_values),
            ])
    return path
