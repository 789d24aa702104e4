"""Multi-stage temporal convolution network over frozen frame features.

Stage 1 projects features with a 1x1 convolution and applies a stack of
dilated residual layers (dilation doubling per layer, non-causal padding);
each later stage refines the previous stage's softmax probabilities with the
same layer stack. Training minimizes the sum of per-stage cross-entropies.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from torch import nn

from ..exceptions import ConfigError, DegenerateSplitError
from ..rng import named_stream
from .features import FeatureSequence
from .metrics import MetricsReport, macro_f1, per_class_f1, video_f1
from .probe import ProbeConfig, make_torch_optimizer, split_videos


@dataclass(frozen=True)
class MSTCNConfig:
    stages: int = 2
    layers_per_stage: int = 8
    hidden_channels: int = 64
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.layers_per_stage < 1:
            raise ConfigError("layers_per_stage must be >= 1")
        if self.hidden_channels < 1:
            raise ConfigError("hidden_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd and >= 1")


class DilatedResidualLayer(nn.Module):
    def __init__(self, dilation: int, channels: int, kernel_size: int):
        super().__init__()
        pad = dilation * (kernel_size - 1) // 2
        self.conv_dilated = nn.Conv1d(
            channels, channels, kernel_size, padding=pad, dilation=dilation
        )
        self.conv_out = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.conv_dilated(x))
        out = self.conv_out(out)
        return x + out


class SingleStageTCN(nn.Module):
    def __init__(self, in_channels: int, config: MSTCNConfig, n_classes: int):
        super().__init__()
        self.conv_in = nn.Conv1d(in_channels, config.hidden_channels, 1)
        self.layers = nn.ModuleList(
            DilatedResidualLayer(2 ** i, config.hidden_channels, config.kernel_size)
            for i in range(config.layers_per_stage)
        )
        self.conv_out = nn.Conv1d(config.hidden_channels, n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv_in(x)
        for layer in self.layers:
            out = layer(out)
        return self.conv_out(out)


class MultiStageTCN(nn.Module):
    """Returns per-stage logits stacked as (stages, T, n_classes)."""

    def __init__(self, in_channels: int, config: MSTCNConfig, n_classes: int):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        self.stage1 = SingleStageTCN(in_channels, config, n_classes)
        self.refinements = nn.ModuleList(
            SingleStageTCN(n_classes, config, n_classes)
            for _ in range(config.stages - 1)
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError("features must be a non-empty (T, d) matrix")
        x = features.t().unsqueeze(0)
        out = self.stage1(x)
        outputs = [out]
        for stage in self.refinements:
            out = stage(torch.softmax(out, dim=1))
            outputs.append(out)
        return torch.stack([o[0].t() for o in outputs], dim=0)


def mstcn_forward(model: MultiStageTCN, features: np.ndarray) -> np.ndarray:
    """Stages x T x C logits for one video's (T, d) feature matrix."""
    with torch.no_grad():
        out = model(torch.from_numpy(np.asarray(features, dtype=np.float32)))
    return out.numpy()


def stage1_receptive_field(config: MSTCNConfig) -> int:
    """Frames influencing one output of stage 1 (symmetric dilated stack)."""
    return 1 + (config.kernel_size - 1) * (2 ** config.layers_per_stage - 1)


class TemporalConvClassifier(ClassifierMixin, BaseEstimator):
    """MS-TCN per-frame classifier over lists of (T_i, d) feature matrices.

    ``fit`` takes aligned lists of feature matrices and label vectors; one
    optimizer step per video, loss summed over stages.
    """

    def __init__(self, stages=2, layers_per_stage=8, hidden_channels=64,
                 kernel_size=3, optimizer="adamw", learning_rate=1e-3,
                 weight_decay=1e-5, epochs=30, seed=0):
        self.stages = stages
        self.layers_per_stage = layers_per_stage
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed

    def _config(self) -> MSTCNConfig:
        return MSTCNConfig(self.stages, self.layers_per_stage,
                           self.hidden_channels, self.kernel_size)

    def fit(self, X, y, eval_set=None):
        if len(X) == 0 or len(X) != len(y):
            raise ValueError("X and y must be non-empty aligned lists")
        feats = [np.asarray(f, dtype=np.float32) for f in X]
        labels = [np.asarray(v, dtype=np.int64) for v in y]
        self.classes_ = np.unique(np.concatenate(labels))
        if self.classes_.size < 2:
            raise DegenerateSplitError("training videos contain fewer than 2 classes")
        class_index = {int(c): i for i, c in enumerate(self.classes_)}
        mapped = [np.array([class_index[int(v)] for v in lab]) for lab in labels]

        torch.manual_seed(int(named_stream(self.seed, "temporal", "init").integers(2 ** 31)))
        model = MultiStageTCN(feats[0].shape[1], self._config(), self.classes_.size)
        opt = make_torch_optimizer(
            self.optimizer, [{"params": model.parameters(), "lr": self.learning_rate}],
            self.weight_decay,
        )

        best_state = None
        best_f1 = -1.0
        n_classes = int(self.classes_.max()) + 1
        for epoch in range(self.epochs):
            order = named_stream(self.seed, "temporal", "shuffle", epoch).permutation(len(feats))
            model.train()
            for i in order:
                xv = torch.from_numpy(feats[i])
                yv = torch.from_numpy(mapped[i])
                opt.zero_grad(set_to_none=True)
                logits = model(xv)
                loss = sum(
                    torch.nn.functional.cross_entropy(logits[s], yv)
                    for s in range(logits.shape[0])
                )
                loss.backward()
                opt.step()
            if eval_set is not None:
                preds = np.concatenate(self._predict_with(model, eval_set[0]))
                truth = np.concatenate([np.asarray(v) for v in eval_set[1]])
                f1 = macro_f1(preds, truth, n_classes)
                if f1 > best_f1:
                    best_f1 = f1
                    best_state = copy.deepcopy(model.state_dict())
        if best_state is not None:
            model.load_state_dict(best_state)
        model.eval()
        self.model_ = model
        self.best_val_f1_ = best_f1 if best_state is not None else None
        return self

    def _predict_with(self, model: MultiStageTCN, X) -> list[np.ndarray]:
        model.eval()
        out = []
        for f in X:
            logits = mstcn_forward(model, np.asarray(f, dtype=np.float32))
            out.append(self.classes_[logits[-1].argmax(axis=1)])
        return out

    def predict(self, X) -> list[np.ndarray]:
        return self._predict_with(self.model_, X)


def temporal_train(
    features: list[FeatureSequence],
    mstcn_config: MSTCNConfig,
    config: ProbeConfig,
    seed: int,
    n_classes: int | None = None,
) -> MetricsReport:
    """Train the temporal model on frozen per-video features; report test
    F-F1 and V-F1."""
    if n_classes is None:
        n_classes = int(max(f.labels.max() for f in features)) + 1
    by_id = {f.video_id: f for f in features}
    train_ids, val_ids, test_ids = split_videos([f.video_id for f in features], seed)

    def pack(ids):
        return ([by_id[v].embeddings for v in ids], [by_id[v].labels for v in ids])

    x_tr, y_tr = pack(train_ids)
    x_va, y_va = pack(val_ids)
    x_te, y_te = pack(test_ids)

    clf = TemporalConvClassifier(
        stages=mstcn_config.stages,
        layers_per_stage=mstcn_config.layers_per_stage,
        hidden_channels=mstcn_config.hidden_channels,
        kernel_size=mstcn_config.kernel_size,
        optimizer=config.optimizer,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        epochs=config.epochs,
        seed=seed,
    )
    clf.fit(x_tr, y_tr, eval_set=(x_va, y_va) if x_va else None)

    preds = clf.predict(x_te)
    flat_preds = np.concatenate(preds)
    flat_truth = np.concatenate(y_te)
    f1s, _ = per_class_f1(flat_preds, flat_truth, n_classes)
    vf1 = video_f1(list(zip(preds, y_te)), n_classes)
    return MetricsReport(
        macro_f1=float(f1s.mean()),
        video_f1=vf1,
        per_class_f1=[float(v) for v in f1s],
        n_samples=int(flat_truth.size),
    )
