"""Downstream evaluation: feature extraction, probing, fine-tuning, the
temporal model, metrics, and the low-shot harness."""

from .features import FeatureSequence, extract_features, preprocess_frame
from .lowshot import (
    LowshotRow,
    curve_from_features,
    lowshot_curve,
    lowshot_split,
    sample_video_ids,
    write_lowshot_csv,
)
from .metrics import MetricsReport, confusion_counts, macro_f1, per_class_f1, video_f1, write_metrics
from .probe import (
    LinearProbeClassifier,
    ProbeConfig,
    ProbeResult,
    evaluate_predictions,
    finetune,
    linear_probe,
    split_videos,
    stack_split,
)
from .temporal import (
    MSTCNConfig,
    MultiStageTCN,
    TemporalConvClassifier,
    mstcn_forward,
    stage1_receptive_field,
    temporal_train,
)

__all__ = [
    "FeatureSequence",
    "LinearProbeClassifier",
    "LowshotRow",
    "MSTCNConfig",
    "MetricsReport",
    "MultiStageTCN",
    "ProbeConfig",
    "ProbeResult",
    "TemporalConvClassifier",
    "confusion_counts",
    "curve_from_features",
    "evaluate_predictions",
    "extract_features",
    "finetune",
    "linear_probe",
    "lowshot_curve",
    "lowshot_split",
    "macro_f1",
    "mstcn_forward",
    "per_class_f1",
    "preprocess_frame",
    "sample_video_ids",
    "split_videos",
    "stack_split",
    "stage1_receptive_field",
    "temporal_train",
    "video_f1",
    "write_lowshot_csv",
    "write_metrics",
]
