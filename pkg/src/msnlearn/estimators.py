"""sklearn-style estimator facade.

``MaskedSiamesePretrainer`` is the unsupervised representation learner
(fit on an image stack, transform images to embeddings); together with
``LinearProbeClassifier`` and ``TemporalConvClassifier`` it composes with
sklearn pipelines and model-selection tooling.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .dataio import ImageBatch
from .downstream.features import preprocess_frame
from .downstream.probe import LinearProbeClassifier
from .downstream.temporal import TemporalConvClassifier
from .encoder import VIT_PRESETS, ViTConfig
from .trainer import TrainConfig, TrainState, load_train_state, run_pretraining, save_train_state
from .validation import check_image_stack
from .views import ViewConfig, patchify

__all__ = [
    "LinearProbeClassifier",
    "MaskedSiamesePretrainer",
    "TemporalConvClassifier",
]


class MaskedSiamesePretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised masked-siamese pretrainer with a transform to frozen
    embeddings.

    ``fit`` consumes an (N, H, W, 3) float image stack in [0, 1] (labels are
    ignored); ``transform`` maps images to (N, d) embeddings from the EMA
    target encoder using deterministic eval-time preprocessing.
    """

    def __init__(
        self,
        vit: str | ViTConfig = "vit-nano",
        view_config: ViewConfig | None = None,
        n_prototypes: int = 1024,
        tau_anchor: float = 0.1,
        tau_target: float = 0.025,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.01,
        batch_size: int = 32,
        epochs: int = 20,
        warmup_epochs: int = 1,
        ema_start: float = 0.996,
        ema_end: float = 1.0,
        me_max_weight: float = 1.0,
        sinkhorn_iters: int = 3,
        seed: int = 0,
    ):
        self.vit = vit
        self.view_config = view_config
        self.n_prototypes = n_prototypes
        self.tau_anchor = tau_anchor
        self.tau_target = tau_target
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.ema_start = ema_start
        self.ema_end = ema_end
        self.me_max_weight = me_max_weight
        self.sinkhorn_iters = sinkhorn_iters
        self.seed = seed

    def _vit_config(self) -> ViTConfig:
        if isinstance(self.vit, ViTConfig):
            return self.vit
        if self.vit in VIT_PRESETS:
            return VIT_PRESETS[self.vit]
        raise ValueError(
            f"vit must be a ViTConfig or one of {sorted(VIT_PRESETS)}, got {self.vit!r}"
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            ema_start=self.ema_start,
            ema_end=self.ema_end,
            me_max_weight=self.me_max_weight,
            sinkhorn_iters=self.sinkhorn_iters,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_image_stack(X)
        images = ImageBatch(
            X.astype(np.float32), [f"img_{i}" for i in range(X.shape[0])]
        )
        reports: list[dict] = []
        state, _ = run_pretraining(
            images, self._vit_config(), self._train_config(), out_dir=None,
            view_config=self.view_config,
            n_prototypes=self.n_prototypes,
            tau_anchor=self.tau_anchor,
            tau_target=self.tau_target,
            on_report=lambda r: reports.append(r.log_record()),
        )
        self.state_ = state
        self.report_log_ = reports
        self.embedding_dim_ = state.vit_config.hidden_dim
        return self

    def _require_fitted(self) -> TrainState:
        state = getattr(self, "state_", None)
        if state is None:
            raise NotFittedError("MaskedSiamesePretrainer is not fitted yet")
        return state

    def transform(self, X, batch_size: int = 256) -> np.ndarray:
        state = self._require_fitted()
        X = check_image_stack(X)
        cfg = state.vit_config
        size = cfg.max_grid * cfg.patch_size
        rows = []
        for lo in range(0, X.shape[0], batch_size):
            seqs = [
                patchify(preprocess_frame(img, size), cfg.patch_size)
                for img in X[lo:lo + batch_size]
            ]
            with torch.no_grad():
                rows.append(state.target.encode_sequences(seqs).numpy())
        return np.concatenate(rows, axis=0)

    def save_checkpoint(self, path: Path | str) -> Path:
        state = self._require_fitted()
        return save_train_state(path, state, self._train_config())

    @classmethod
    def from_checkpoint(cls, path: Path | str) -> "MaskedSiamesePretrainer":
        state, config = load_train_state(path)
        est = cls(
            vit=state.vit_config,
            view_config=state.view_config,
            n_prototypes=state.bank.n_prototypes,
            tau_anchor=state.bank.tau_anchor,
            tau_target=state.bank.tau_target,
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            batch_size=config.batch_size,
            epochs=config.epochs,
            warmup_epochs=config.warmup_epochs,
            ema_start=config.ema_start,
            ema_end=config.ema_end,
            me_max_weight=config.me_max_weight,
            sinkhorn_iters=config.sinkhorn_iters,
            seed=config.seed,
        )
        est.state_ = state
        est.report_log_ = []
        est.embedding_dim_ = state.vit_config.hidden_dim
        return est
