"""Linear probing and fine-tuning on frozen or unfrozen encoder features."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from ..dataio import DatasetManifest, load_images
from ..exceptions import ConfigError, DegenerateSplitError
from ..rng import named_stream, truncated_normal
from ..trainer import load_train_state
from ..views import patchify
from .features import FeatureSequence, preprocess_frame
from .metrics import MetricsReport, macro_f1, per_class_f1, video_f1

_OPTIMIZERS = ("adam", "adamw", "sgd")


@dataclass(frozen=True)
class ProbeConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 256
    epochs: int = 30

    def __post_init__(self) -> None:
        if self.optimizer not in _OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


def make_torch_optimizer(name: str, param_groups, weight_decay: float):
    if name == "adam":
        return torch.optim.Adam(param_groups, weight_decay=weight_decay)
    if name == "adamw":
        return torch.optim.AdamW(param_groups, weight_decay=weight_decay)
    if name == "sgd":
        return torch.optim.SGD(param_groups, momentum=0.9, weight_decay=weight_decay)
    raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}")


def split_videos(video_ids: list[str], seed: int) -> tuple[list[str], list[str], list[str]]:
    """Deterministic 60/20/20 train/val/test split over whole videos."""
    n = len(video_ids)
    if n < 3:
        raise DegenerateSplitError("need at least 3 videos for a train/val/test split")
    order = named_stream(seed, "split").permutation(n)
    shuffled = [video_ids[i] for i in order]
    n_train = max(1, int(np.floor(0.6 * n + 0.5)))
    n_val = max(1, int(np.floor(0.2 * n + 0.5)))
    while n_train + n_val >= n:
        n_train -= 1
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    return train, val, test


def stack_split(
    features: list[FeatureSequence], video_ids: list[str]
) -> tuple[np.ndarray, np.ndarray, list[tuple[str, slice]]]:
    """Concatenate the given videos' frames, recording per-video row slices."""
    by_id = {f.video_id: f for f in features}
    xs, ys, slices = [], [], []
    row = 0
    for vid in video_ids:
        f = by_id[vid]
        xs.append(f.embeddings)
        ys.append(f.labels)
        slices.append((vid, slice(row, row + len(f.labels))))
        row += len(f.labels)
    if not xs:
        return np.zeros((0, 1), np.float32), np.zeros(0, np.int64), []
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys), slices


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Single affine layer trained with softmax cross-entropy on frozen
    features; sklearn-compatible (get_params/set_params/clone)."""

    def __init__(self, optimizer="adamw", learning_rate=1e-3, weight_decay=1e-5,
                 batch_size=256, epochs=30, seed=0):
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y, eval_set=None):
        from ..validation import check_features, check_labels

        X = check_features(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise DegenerateSplitError(
                "training split contains fewer than 2 classes"
            )
        class_index = {int(c): i for i, c in enumerate(self.classes_)}
        y_idx = np.array([class_index[int(v)] for v in y], dtype=np.int64)

        d, c = X.shape[1], self.classes_.size
        head = torch.nn.Linear(d, c)
        init_rng = named_stream(self.seed, "probe", "init")
        with torch.no_grad():
            head.weight.copy_(torch.from_numpy(
                truncated_normal(init_rng, (c, d), std=0.01)).float())
            head.bias.zero_()
        opt = make_torch_optimizer(
            self.optimizer, [{"params": head.parameters(), "lr": self.learning_rate}],
            self.weight_decay,
        )

        xt = torch.from_numpy(X)
        yt = torch.from_numpy(y_idx)
        eval_pack = None
        if eval_set is not None:
            xv, yv = eval_set
            xv = check_features(xv, "eval X")
            yv = check_labels(np.asarray(yv), xv.shape[0], "eval y")
            eval_pack = (torch.from_numpy(xv), yv)

        best_state = None
        best_f1 = -1.0
        n = X.shape[0]
        for epoch in range(self.epochs):
            perm = named_stream(self.seed, "probe", "shuffle", epoch).permutation(n)
            head.train()
            for lo in range(0, n, self.batch_size):
                idx = torch.from_numpy(perm[lo:lo + self.batch_size].copy())
                opt.zero_grad(set_to_none=True)
                loss = torch.nn.functional.cross_entropy(head(xt[idx]), yt[idx])
                loss.backward()
                opt.step()
            if eval_pack is not None:
                head.eval()
                with torch.no_grad():
                    pred = head(eval_pack[0]).argmax(dim=1).numpy()
                f1 = macro_f1(self.classes_[pred], eval_pack[1],
                              int(self.classes_.max()) + 1)
                if f1 > best_f1:
                    best_f1 = f1
                    best_state = copy.deepcopy(head.state_dict())
        if best_state is not None:
            head.load_state_dict(best_state)

        self.coef_ = head.weight.detach().numpy().copy()
        self.intercept_ = head.bias.detach().numpy().copy()
        self.best_val_f1_ = best_f1 if best_state is not None else None
        return self

    def decision_function(self, X):
        from ..validation import check_features

        X = check_features(X)
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


@dataclass
class ProbeResult:
    """Trained probe weights plus held-out metrics."""

    weights: tuple[np.ndarray, np.ndarray]
    report: MetricsReport
    val_report: MetricsReport | None
    classifier: LinearProbeClassifier


def evaluate_predictions(
    preds: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    slices: list[tuple[str, slice]] | None = None,
) -> MetricsReport:
    f1s, ids = per_class_f1(preds, labels, n_classes)
    vf1 = None
    if slices:
        vf1 = video_f1([(preds[s], labels[s]) for _, s in slices], n_classes)
    return MetricsReport(
        macro_f1=float(f1s.mean()),
        video_f1=vf1,
        per_class_f1=[float(v) for v in f1s],
        n_samples=int(labels.size),
    )


def linear_probe(
    features: list[FeatureSequence],
    config: ProbeConfig,
    seed: int,
    n_classes: int | None = None,
) -> ProbeResult:
    """Train a linear classifier on frozen features, select on the val split,
    and report test metrics (frame macro F1 and per-video F1)."""
    if n_classes is None:
        n_classes = int(max(f.labels.max() for f in features)) + 1
    train_ids, val_ids, test_ids = split_videos([f.video_id for f in features], seed)
    x_tr, y_tr, _ = stack_split(features, train_ids)
    x_va, y_va, _ = stack_split(features, val_ids)
    x_te, y_te, te_slices = stack_split(features, test_ids)
    if np.unique(y_tr).size < 2:
        raise DegenerateSplitError("training split contains fewer than 2 classes")

    clf = LinearProbeClassifier(
        optimizer=config.optimizer, learning_rate=config.learning_rate,
        weight_decay=config.weight_decay, batch_size=config.batch_size,
        epochs=config.epochs, seed=seed,
    )
    clf.fit(x_tr, y_tr, eval_set=(x_va, y_va) if len(y_va) else None)

    test_report = evaluate_predictions(clf.predict(x_te), y_te, n_classes, te_slices)
    val_report = None
    if len(y_va):
        val_report = evaluate_predictions(clf.predict(x_va), y_va, n_classes)
    return ProbeResult(
        weights=(clf.coef_, clf.intercept_),
        report=test_report,
        val_report=val_report,
        classifier=clf,
    )


def _frames_tensor(
    manifest: DatasetManifest, video_ids: list[str], input_size: int, patch: int
) -> tuple[list, np.ndarray, list[tuple[str, slice]]]:
    groups = manifest.by_video()
    entry_index = {id(e): i for i, e in enumerate(manifest.entries)}
    seqs, labels, slices = [], [], []
    row = 0
    for vid in video_ids:
        entries = groups[vid]
        idxs = [entry_index[id(e)] for e in entries]
        batch = load_images(manifest, idxs)
        for img in batch.data:
            seqs.append(patchify(preprocess_frame(img, input_size), patch))
        labels.extend(e.label for e in entries)
        slices.append((vid, slice(row, row + len(entries))))
        row += len(entries)
    return seqs, np.asarray(labels, dtype=np.int64), slices


def finetune(
    checkpoint_path: Path | str,
    manifest: DatasetManifest,
    config: ProbeConfig,
    seed: int,
    encoder_lr_scale: float = 0.1,
) -> MetricsReport:
    """End-to-end training of a classification head on the unfrozen
    pretrained backbone; encoder learning rate is scaled down."""
    if encoder_lr_scale < 0:
        raise ConfigError("encoder_lr_scale must be >= 0")
    if not manifest.is_fully_labeled():
        raise DegenerateSplitError("fine-tuning requires a fully labeled manifest")
    state, _ = load_train_state(checkpoint_path)
    encoder = copy.deepcopy(state.target)
    input_size = state.vit_config.max_grid * state.vit_config.patch_size
    patch = state.vit_config.patch_size

    train_ids, val_ids, test_ids = split_videos(manifest.video_ids(), seed)
    tr_seqs, y_tr, _ = _frames_tensor(manifest, train_ids, input_size, patch)
    va_seqs, y_va, _ = _frames_tensor(manifest, val_ids, input_size, patch)
    te_seqs, y_te, te_slices = _frames_tensor(manifest, test_ids, input_size, patch)

    classes = np.unique(y_tr)
    if classes.size < 2:
        raise DegenerateSplitError("training split contains fewer than 2 classes")
    class_index = {int(c): i for i, c in enumerate(classes)}
    y_tr_idx = torch.from_numpy(
        np.array([class_index[int(v)] for v in y_tr], dtype=np.int64)
    )

    d, c = state.vit_config.hidden_dim, classes.size
    head = torch.nn.Linear(d, c)
    init_rng = named_stream(seed, "probe", "init")
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(
            truncated_normal(init_rng, (c, d), std=0.01)).float())
        head.bias.zero_()

    tune_encoder = encoder_lr_scale > 0
    for p in encoder.parameters():
        p.requires_grad_(tune_encoder)
    groups = [{"params": head.parameters(), "lr": config.learning_rate}]
    if tune_encoder:
        groups.append({
            "params": encoder.parameters(),
            "lr": config.learning_rate * encoder_lr_scale,
        })
    opt = make_torch_optimizer(config.optimizer, groups, config.weight_decay)

    def encode_rows(seq_list, train_mode: bool):
        outs = []
        for lo in range(0, len(seq_list), config.batch_size):
            chunk = seq_list[lo:lo + config.batch_size]
            if train_mode:
                outs.append(encoder.encode_sequences(chunk))
            else:
                with torch.no_grad():
                    outs.append(encoder.encode_sequences(chunk))
        return torch.cat(outs, dim=0)

    n = len(tr_seqs)
    best_state = None
    best_f1 = -1.0
    n_classes_val = int(classes.max()) + 1
    for epoch in range(config.epochs):
        perm = named_stream(seed, "probe", "shuffle", epoch).permutation(n)
        encoder.train()
        head.train()
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            chunk = [tr_seqs[i] for i in idx]
            opt.zero_grad(set_to_none=True)
            z = encoder.encode_sequences(chunk) if tune_encoder else encode_rows_frozen(encoder, chunk)
            loss = torch.nn.functional.cross_entropy(head(z), y_tr_idx[torch.from_numpy(idx.copy())])
            loss.backward()
            opt.step()
        if len(y_va):
            encoder.eval()
            head.eval()
            with torch.no_grad():
                zv = encode_rows(va_seqs, train_mode=False)
                pred = head(zv).argmax(dim=1).numpy()
            f1 = macro_f1(classes[pred], y_va, n_classes_val)
            if f1 > best_f1:
                best_f1 = f1
                best_state = (
                    copy.deepcopy(head.state_dict()),
                    copy.deepcopy(encoder.state_dict()) if tune_encoder else None,
                )
    if best_state is not None:
        head.load_state_dict(best_state[0])
        if best_state[1] is not None:
            encoder.load_state_dict(best_state[1])

    encoder.eval()
    head.eval()
    with torch.no_grad():
        zt = encode_rows(te_seqs, train_mode=False)
        preds = classes[head(zt).argmax(dim=1).numpy()]
    return evaluate_predictions(preds, y_te, manifest.n_classes, te_slices)


def encode_rows_frozen(encoder, chunk):
    with torch.no_grad():
        z = encoder.encode_sequences(chunk)
    return z
