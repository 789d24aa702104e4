"""Self-supervised pretraining loop: optimizer, EMA teacher, schedules,
checkpointing, and collapse diagnostics.

Each step builds anchor/target views for a batch, scores them against the
prototype bank, assembles the matching objective, updates the anchor encoder
and prototypes by AdamW, and then moves the target encoder toward the anchor
by an exponential moving average. The per-step prototype-usage entropy
H(mean anchor assignment) is the collapse diagnostic written to the log.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_tensor_file, write_tensor_file
from .dataio import DatasetManifest, ImageBatch, load_all_images
from .encoder import ViTConfig, VisionTransformer, init_encoder
from .exceptions import CheckpointError, ConfigError, NumericsError
from .objective import LossBreakdown, PrototypeBank, msn_loss, prototype_probs, sinkhorn
from .rng import named_stream
from .views import ViewConfig, ViewSet, make_viewset

METRICS_LOG_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.msn"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 20
    warmup_epochs: int = 1
    ema_start: float = 0.996
    ema_end: float = 1.0
    me_max_weight: float = 1.0
    sinkhorn_iters: int = 3
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.ema_start <= self.ema_end <= 1.0:
            raise ConfigError("need 0 <= ema_start <= ema_end <= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if self.me_max_weight < 0:
            raise ConfigError("me_max_weight must be >= 0")
        if self.sinkhorn_iters < 0:
            raise ConfigError("sinkhorn_iters must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class StepReport:
    step: int
    loss: LossBreakdown
    usage_entropy: float
    grad_norm: float
    momentum: float
    wall_time: float

    def log_record(self) -> dict[str, float]:
        floats = self.loss.as_floats()
        return {
            "step": self.step,
            "cross_entropy": floats["cross_entropy"],
            "me_max": floats["me_max"],
            "total": floats["total"],
            "usage_entropy": self.usage_entropy,
            "grad_norm": self.grad_norm,
            "momentum": self.momentum,
        }


@dataclass
class TrainState:
    anchor: VisionTransformer
    target: VisionTransformer
    bank: PrototypeBank
    optimizer: torch.optim.AdamW
    view_config: ViewConfig
    step: int
    total_steps: int
    seed: int

    @property
    def vit_config(self) -> ViTConfig:
        return self.anchor.config


def cosine_momentum(step: int, total_steps: int, start: float, end: float) -> float:
    """EMA momentum schedule increasing from start to end over training."""
    if total_steps <= 1:
        return end
    progress = min(max(step / (total_steps - 1), 0.0), 1.0)
    return end - (end - start) * 0.5 * (1.0 + math.cos(math.pi * progress))


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at the last step."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def ema_update(
    target: VisionTransformer, anchor: VisionTransformer, momentum: float
) -> VisionTransformer:
    """In-place t' = momentum * t + (1 - momentum) * a for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must be in [0, 1]")
    anchor_params = dict(anchor.named_parameters())
    for name, t in target.named_parameters():
        a = anchor_params.get(name)
        if a is None or a.shape != t.shape:
            raise ValueError(f"anchor/target parameter mismatch at {name!r}")
        t.copy_(momentum * t + (1.0 - momentum) * a)
    return target


def init_train_state(
    vit_config: ViTConfig,
    view_config: ViewConfig,
    config: TrainConfig,
    total_steps: int,
    n_prototypes: int = 1024,
    tau_anchor: float = 0.1,
    tau_target: float = 0.025,
) -> TrainState:
    anchor = init_encoder(vit_config, named_stream(config.seed, "init", "anchor"))
    target = copy.deepcopy(anchor)
    for p in target.parameters():
        p.requires_grad_(False)
    bank = PrototypeBank(n_prototypes, vit_config.hidden_dim, tau_anchor, tau_target)
    with torch.no_grad():
        q0 = named_stream(config.seed, "init", "bank").normal(
            0.0, 0.02, size=(n_prototypes, vit_config.hidden_dim)
        )
        bank.weight.copy_(torch.from_numpy(q0).float())
    optimizer = make_optimizer(anchor, bank, config)
    return TrainState(
        anchor=anchor, target=target, bank=bank, optimizer=optimizer,
        view_config=view_config, step=0, total_steps=total_steps, seed=config.seed,
    )


def make_optimizer(
    anchor: VisionTransformer, bank: PrototypeBank, config: TrainConfig
) -> torch.optim.AdamW:
    params = list(anchor.parameters()) + [bank.weight]
    return torch.optim.AdamW(
        params,
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=config.weight_decay,
    )


def build_viewsets(
    batch: ImageBatch, view_config: ViewConfig, seed: int, step: int
) -> list[ViewSet]:
    """Anchor/target views for a batch; one named stream per (step, image)."""
    return [
        make_viewset(img, view_config, named_stream(seed, "views", step, image_id))
        for img, image_id in zip(batch.data, batch.ids)
    ]


def batch_loss(
    anchor_enc: VisionTransformer,
    target_enc: VisionTransformer,
    bank: PrototypeBank,
    viewsets: list[ViewSet],
    sinkhorn_iters: int,
    me_max_weight: float,
) -> LossBreakdown:
    """Full objective for prepared viewsets (targets balanced and detached)."""
    n_views = viewsets[0].n_anchor_views
    if any(vs.n_anchor_views != n_views for vs in viewsets):
        raise ValueError("all viewsets in a batch must have the same anchor count")

    with torch.no_grad():
        z_t = target_enc.encode_sequences([vs.target for vs in viewsets])
        p_t = prototype_probs(bank, z_t, bank.tau_target)
        p_t = sinkhorn(p_t, sinkhorn_iters)

    # Consecutive anchor views of equal shape share one encode call; rows
    # stay view-major (all of view m, then all of view m+1, ...).
    def view_shape(m: int) -> tuple[int, int]:
        a = viewsets[0].anchors[m]
        return len(a), a.grid_size

    groups: list[list[int]] = []
    for m in range(n_views):
        if groups and view_shape(groups[-1][-1]) == view_shape(m):
            groups[-1].append(m)
        else:
            groups.append([m])
    anchor_rows = []
    for members in groups:
        seqs = [vs.anchors[m] for m in members for vs in viewsets]
        z_a = anchor_enc.encode_sequences(seqs)
        anchor_rows.append(prototype_probs(bank, z_a, bank.tau_anchor))
    p_a = torch.cat(anchor_rows, dim=0)
    return msn_loss(p_a, p_t, me_max_weight)


def gradient_norm(state: TrainState) -> float:
    total = 0.0
    for p in list(state.anchor.parameters()) + [state.bank.weight]:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def train_step(
    state: TrainState, batch: ImageBatch, config: TrainConfig
) -> tuple[TrainState, StepReport]:
    """One optimization step; deterministic given (state, batch, config)."""
    t0 = time.perf_counter()
    viewsets = build_viewsets(batch, state.view_config, state.seed, state.step)

    lr = cosine_lr(
        state.step, state.total_steps,
        _warmup_steps(config, state.total_steps), config.learning_rate,
    )
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    breakdown = batch_loss(
        state.anchor, state.target, state.bank, viewsets,
        config.sinkhorn_iters, config.me_max_weight,
    )
    if not torch.isfinite(breakdown.total):
        raise NumericsError(f"non-finite loss at step {state.step}")

    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    grad_norm = gradient_norm(state)
    state.optimizer.step()

    momentum = cosine_momentum(
        state.step, state.total_steps, config.ema_start, config.ema_end
    )
    ema_update(state.target, state.anchor, momentum)

    report = StepReport(
        step=state.step,
        loss=breakdown,
        usage_entropy=float(breakdown.me_max.detach()),
        grad_norm=grad_norm,
        momentum=momentum,
        wall_time=time.perf_counter() - t0,
    )
    state.step += 1
    return state, report


def _warmup_steps(config: TrainConfig, total_steps: int) -> int:
    steps_per_epoch = max(total_steps // config.epochs, 1)
    return config.warmup_epochs * steps_per_epoch


def _objective_header(bank: PrototypeBank) -> dict:
    return {
        "n_prototypes": bank.n_prototypes,
        "tau_anchor": bank.tau_anchor,
        "tau_target": bank.tau_target,
    }


def save_train_state(path: Path | str, state: TrainState, config: TrainConfig) -> Path:
    header = {
        "kind": "msn-train-state",
        "vit": dataclasses.asdict(state.vit_config),
        "objective": _objective_header(state.bank),
        "views": _view_config_dict(state.view_config),
        "train": dataclasses.asdict(config),
        "step": state.step,
        "total_steps": state.total_steps,
        "seed": state.seed,
    }
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.anchor.named_parameters():
        tensors[f"anchor.{name}"] = p.detach().cpu().numpy()
    for name, p in state.target.named_parameters():
        tensors[f"target.{name}"] = p.detach().cpu().numpy()
    tensors["bank.weight"] = state.bank.weight.detach().cpu().numpy()

    opt_state = state.optimizer.state_dict()["state"]
    param_names = [f"anchor.{n}" for n, _ in state.anchor.named_parameters()]
    param_names.append("bank.weight")
    steps = set()
    for idx, entry in opt_state.items():
        name = param_names[idx]
        tensors[f"opt.{name}.exp_avg"] = entry["exp_avg"].cpu().numpy()
        tensors[f"opt.{name}.exp_avg_sq"] = entry["exp_avg_sq"].cpu().numpy()
        steps.add(int(entry["step"]))
    header["optimizer_step"] = max(steps) if steps else 0
    return write_tensor_file(path, header, tensors)


def load_train_state(path: Path | str) -> tuple[TrainState, TrainConfig]:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "msn-train-state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    vit_config = ViTConfig(**header["vit"])
    view_config = _view_config_from_dict(header["views"])
    config = TrainConfig(**header["train"])
    obj = header["objective"]

    anchor = VisionTransformer(vit_config)
    target = VisionTransformer(vit_config)
    bank = PrototypeBank(
        obj["n_prototypes"], vit_config.hidden_dim,
        obj["tau_anchor"], obj["tau_target"],
    )
    _load_module(anchor, tensors, "anchor.")
    _load_module(target, tensors, "target.")
    for p in target.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        bank.weight.copy_(torch.from_numpy(tensors["bank.weight"]))

    optimizer = make_optimizer(anchor, bank, config)
    param_names = [f"anchor.{n}" for n, _ in anchor.named_parameters()]
    param_names.append("bank.weight")
    opt_step = int(header.get("optimizer_step", 0))
    if opt_step > 0:
        opt_sd = optimizer.state_dict()
        opt_sd["state"] = {
            idx: {
                "step": torch.tensor(float(opt_step)),
                "exp_avg": torch.from_numpy(tensors[f"opt.{name}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"].copy()),
            }
            for idx, name in enumerate(param_names)
        }
        optimizer.load_state_dict(opt_sd)

    state = TrainState(
        anchor=anchor, target=target, bank=bank, optimizer=optimizer,
        view_config=view_config, step=int(header["step"]),
        total_steps=int(header["total_steps"]), seed=int(header["seed"]),
    )
    return state, config


def _load_module(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = prefix + name
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {key!r}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"tensor {key!r} has shape {arr.shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr.copy()))


def _view_config_dict(view_config: ViewConfig) -> dict:
    d = dataclasses.asdict(view_config)
    d["focal_scale"] = list(d["focal_scale"])
    d["augment"]["crop_scale"] = list(d["augment"]["crop_scale"])
    d["augment"]["blur_sigma"] = list(d["augment"]["blur_sigma"])
    return d


def _view_config_from_dict(d: dict) -> ViewConfig:
    from .views import AugmentConfig

    aug = dict(d["augment"])
    aug["crop_scale"] = tuple(aug["crop_scale"])
    aug["blur_sigma"] = tuple(aug["blur_sigma"])
    rest = {k: v for k, v in d.items() if k != "augment"}
    rest["focal_scale"] = tuple(rest["focal_scale"])
    return ViewConfig(augment=AugmentConfig(**aug), **rest)


def run_pretraining(
    images: ImageBatch,
    vit_config: ViTConfig,
    config: TrainConfig,
    out_dir: Path | str | None,
    *,
    view_config: ViewConfig | None = None,
    n_prototypes: int = 1024,
    tau_anchor: float = 0.1,
    tau_target: float = 0.025,
    on_report=None,
) -> tuple[TrainState, Path | None]:
    """Run the full schedule over in-memory images; optionally write artifacts."""
    view_config = view_config if view_config is not None else ViewConfig()
    n = images.data.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    state = init_train_state(
        vit_config, view_config, config, total_steps,
        n_prototypes=n_prototypes, tau_anchor=tau_anchor, tau_target=tau_target,
    )

    out_path: Path | None = None
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / METRICS_LOG_NAME).open("w", encoding="utf-8")
    try:
        for epoch in range(config.epochs):
            perm = named_stream(config.seed, "shuffle", epoch).permutation(n)
            for lo in range(0, n, config.batch_size):
                idx = perm[lo:lo + config.batch_size]
                batch = ImageBatch(images.data[idx], [images.ids[i] for i in idx])
                state, report = train_step(state, batch, config)
                if log_fh is not None:
                    log_fh.write(json.dumps(report.log_record()) + "\n")
                if on_report is not None:
                    on_report(report)
            if out_dir is not None and (epoch + 1) % config.checkpoint_every == 0 \
                    and epoch + 1 < config.epochs:
                save_train_state(
                    out_dir / f"checkpoint-epoch{epoch + 1:04d}.msn", state, config
                )
        if out_dir is not None:
            out_path = save_train_state(out_dir / CHECKPOINT_NAME, state, config)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, out_path


def pretrain(
    manifest: DatasetManifest,
    vit_config: ViTConfig,
    config: TrainConfig,
    out_dir: Path | str,
    **kwargs,
) -> Path:
    """Pretrain on every frame of the manifest (labels ignored); returns the
    final checkpoint path. Writes one metrics-log line per step."""
    if len(manifest.entries) == 0:
        raise ValueError("manifest must contain at least one frame")
    images = load_all_images(manifest)
    _, path = run_pretraining(images, vit_config, config, out_dir, **kwargs)
    assert path is not None
    return path
