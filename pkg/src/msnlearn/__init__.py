"""Masked siamese self-supervised pretraining with a phase-recognition
evaluation suite on synthetic procedure videos."""

from .dataio import DatasetManifest, ImageBatch, SynthSpec, generate_synthetic, load_images, load_manifest
from .encoder import VIT_PRESETS, ViTConfig, VisionTransformer, init_encoder, parameter_count
from .estimators import LinearProbeClassifier, MaskedSiamesePretrainer, TemporalConvClassifier
from .objective import PrototypeBank, cross_entropy, entropy, msn_loss, prototype_probs, sinkhorn
from .trainer import TrainConfig, ema_update, pretrain, train_step
from .views import AugmentConfig, TokenSequence, ViewConfig, ViewSet, make_viewset, patchify, random_mask

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "DatasetManifest",
    "ImageBatch",
    "LinearProbeClassifier",
    "MaskedSiamesePretrainer",
    "PrototypeBank",
    "SynthSpec",
    "TemporalConvClassifier",
    "TokenSequence",
    "TrainConfig",
    "VIT_PRESETS",
    "ViTConfig",
    "ViewConfig",
    "ViewSet",
    "VisionTransformer",
    "__version__",
    "cross_entropy",
    "ema_update",
    "entropy",
    "generate_synthetic",
    "init_encoder",
    "load_images",
    "load_manifest",
    "make_viewset",
    "msn_loss",
    "parameter_count",
    "patchify",
    "pretrain",
    "prototype_probs",
    "random_mask",
    "sinkhorn",
    "train_step",
]
