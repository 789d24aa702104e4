"""Vision Transformer encoder producing one [CLS] embedding per token sequence.

Standard pre-norm ViT blocks with GELU MLPs. Token sequences may cover only a
subset of the patch grid (masked anchors, focal crops); positional embeddings
are looked up per surviving grid slot, with smaller view grids aligned to the
top-left corner of the full ``max_grid`` table.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigError, NumericsError
from .rng import truncated_normal
from .views import TokenSequence


@dataclass(frozen=True)
class ViTConfig:
    layers: int
    hidden_dim: int
    mlp_dim: int
    heads: int
    patch_size: int
    max_grid: int

    def __post_init__(self) -> None:
        for name in ("layers", "hidden_dim", "mlp_dim", "heads", "patch_size", "max_grid"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ViTConfig.{name} must be positive")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError("hidden_dim must be divisible by heads")

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


# 224-pixel-grid presets for ViT-S/B/L; vit-nano is the desk-scale default.
VIT_PRESETS: dict[str, ViTConfig] = {
    "vit-nano": ViTConfig(layers=4, hidden_dim=128, mlp_dim=256, heads=4, patch_size=8, max_grid=8),
    "vit-s": ViTConfig(layers=12, hidden_dim=384, mlp_dim=1536, heads=6, patch_size=16, max_grid=14),
    "vit-b": ViTConfig(layers=12, hidden_dim=768, mlp_dim=3072, heads=12, patch_size=16, max_grid=14),
    "vit-l": ViTConfig(layers=24, hidden_dim=1024, mlp_dim=4096, heads=16, patch_size=16, max_grid=14),
}


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_dim),
            nn.GELU(),
            nn.Linear(mlp_dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class VisionTransformer(nn.Module):
    """ViT over patch-token sequences; returns the final-norm [CLS] vector."""

    def __init__(self, config: ViTConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.patch_proj = nn.Linear(config.token_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(config.max_grid ** 2 + 1, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.heads, config.mlp_dim)
            for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(d)
        self.to(dtype)

    def position_slots(self, positions: torch.Tensor, grid_size: int) -> torch.Tensor:
        """Map within-view raster positions to full-grid table slots (+1 for CLS)."""
        if grid_size > self.config.max_grid:
            raise ValueError(
                f"view grid {grid_size} exceeds max_grid {self.config.max_grid}"
            )
        rows = positions // grid_size
        cols = positions % grid_size
        return rows * self.config.max_grid + cols + 1

    def forward(
        self, tokens: torch.Tensor, positions: torch.Tensor, grid_size: int
    ) -> torch.Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.token_dim:
            raise ValueError(
                f"tokens must be (B, L, {self.config.token_dim}), got {tuple(tokens.shape)}"
            )
        b = tokens.shape[0]
        x = self.patch_proj(tokens)
        slots = self.position_slots(positions, grid_size)
        x = x + self.pos_embed[slots]
        cls = (self.cls_token + self.pos_embed[0]).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0]

    def encode_sequences(self, seqs: list[TokenSequence]) -> torch.Tensor:
        """Differentiable batched encode of same-length token sequences."""
        if len(seqs) == 0:
            raise ValueError("cannot encode an empty list of sequences")
        length = len(seqs[0])
        grid = seqs[0].grid_size
        for s in seqs:
            if len(s) != length or s.grid_size != grid:
                raise ValueError(
                    "sequences in one batch must share token count and grid size"
                )
        dtype = self.patch_proj.weight.dtype
        tokens = torch.from_numpy(np.stack([s.tokens for s in seqs])).to(dtype)
        positions = torch.from_numpy(np.stack([s.positions for s in seqs]))
        return self(tokens, positions, grid)


def init_encoder(
    config: ViTConfig,
    rng_stream: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> VisionTransformer:
    """Create a ViT with truncated-normal(std 0.02) weights, zero biases and
    layer-norm offsets, unit layer-norm scales; deterministic per stream."""
    model = VisionTransformer(config, dtype=dtype)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            elif "norm" in name and name.endswith("weight"):
                param.fill_(1.0)
            else:
                values = truncated_normal(rng_stream, tuple(param.shape), std=0.02)
                param.copy_(torch.from_numpy(values).to(dtype))
    return model


def encode(model: VisionTransformer, seq: TokenSequence) -> np.ndarray:
    """Non-differentiable single-sequence embedding as a numpy vector."""
    with torch.no_grad():
        out = model.encode_sequences([seq])
    return out[0].cpu().numpy()


def encode_batch(model: VisionTransformer, seqs: list[TokenSequence]) -> np.ndarray:
    """Non-differentiable batched embedding; rows match ``encode`` per item."""
    with torch.no_grad():
        out = model.encode_sequences(seqs)
    return out.cpu().numpy()


def parameter_count(config: ViTConfig) -> int:
    """Exact number of scalar parameters of an encoder built from ``config``."""
    d, m = config.hidden_dim, config.mlp_dim
    patch = config.token_dim * d + d
    cls_and_pos = d + (config.max_grid ** 2 + 1) * d
    attn = (3 * d * d + 3 * d) + (d * d + d)
    mlp = (d * m + m) + (m * d + d)
    norms = 2 * (2 * d)
    block = attn + mlp + norms
    final_norm = 2 * d
    return patch + cls_and_pos + config.layers * block + final_norm


def _first_nonfinite_module(module: nn.Module, loss_fn: Callable[[], torch.Tensor]) -> str | None:
    offenders: list[str] = []

    def make_hook(name: str):
        def hook(_mod, _inp, out):
            if isinstance(out, torch.Tensor) and not offenders:
                if not torch.isfinite(out).all():
                    offenders.append(name)
        return hook

    handles = [
        mod.register_forward_hook(make_hook(name))
        for name, mod in module.named_modules()
        if name
    ]
    try:
        loss_fn()
    finally:
        for h in handles:
            h.remove()
    return offenders[0] if offenders else None


def gradients(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    extra_params: Iterable[tuple[str, nn.Parameter]] = (),
) -> dict[str, torch.Tensor]:
    """Exact backprop gradients of ``loss_fn()`` for every module parameter.

    Parameters the loss never touches get zero gradients. ``extra_params``
    lets callers include non-encoder leaves (e.g. a prototype matrix) in the
    same gradient structure.
    """
    named = list(module.named_parameters()) + list(extra_params)
    loss = loss_fn()
    if loss.ndim != 0:
        raise ValueError("loss closure must return a scalar")
    if not torch.isfinite(loss):
        where = _first_nonfinite_module(module, loss_fn)
        detail = f"; first non-finite output at {where!r}" if where else ""
        raise NumericsError(f"loss is non-finite{detail}")
    if loss.grad_fn is None:
        # constant loss: nothing in the graph, so every gradient is zero
        return {name: torch.zeros_like(p) for name, p in named}
    grads = torch.autograd.grad(
        loss, [p for _, p in named], allow_unused=True
    )
    return {
        name: (g.detach().clone() if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }
