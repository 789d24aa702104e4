"""Prototype-matching objective: dual-temperature softmax assignments,
Sinkhorn-Knopp target balancing, and cross-entropy with a mean-entropy
maximization (me-max) regularizer.

Anchor embeddings are scored against K learnable prototypes at temperature
``tau_anchor``; target embeddings at the sharper ``tau_target``. The loss is

    mean_{i,m} H(p_i^t, p_{i,m}^a)  -  lambda * H(mean_{i,m} p_{i,m}^a)

with gradients flowing only through the anchor side. The subtracted-entropy
form of the objective follows the masked-siamese training recipe this module
implements; target assignments are constants by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .exceptions import ConfigError

LOG_CLAMP = 1e-12


class PrototypeBank(nn.Module):
    """K x d learnable prototype matrix plus the anchor/target temperatures."""

    def __init__(self, n_prototypes: int, dim: int, tau_anchor: float = 0.1,
                 tau_target: float = 0.025,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if n_prototypes <= 1:
            raise ConfigError("need K > 1 prototypes")
        if not 0.0 < tau_target < tau_anchor < 1.0:
            raise ConfigError(
                "temperatures must satisfy 0 < tau_target < tau_anchor < 1, "
                f"got tau_target={tau_target}, tau_anchor={tau_anchor}"
            )
        self.tau_anchor = float(tau_anchor)
        self.tau_target = float(tau_target)
        self.weight = nn.Parameter(torch.zeros(n_prototypes, dim, dtype=dtype))

    @property
    def n_prototypes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class LossBreakdown:
    """The assembled training objective and its two terms (0-d tensors)."""

    cross_entropy: torch.Tensor
    me_max: torch.Tensor
    me_max_weight: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "cross_entropy": float(self.cross_entropy.detach()),
            "me_max": float(self.me_max.detach()),
            "me_max_weight": float(self.me_max_weight),
            "total": float(self.total.detach()),
        }


def prototype_probs(
    bank: PrototypeBank, z: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Row-stochastic softmax(z @ Q^T / temperature); accepts (d,) or (N, d)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    single = z.ndim == 1
    if single:
        z = z.unsqueeze(0)
    if z.ndim != 2 or z.shape[1] != bank.dim:
        raise ValueError(
            f"embeddings must be (N, {bank.dim}), got {tuple(z.shape)}"
        )
    logits = z @ bank.weight.t() / temperature
    probs = torch.softmax(logits, dim=1)
    return probs[0] if single else probs


@torch.no_grad()
def sinkhorn(probs: torch.Tensor, iterations: int = 3) -> torch.Tensor:
    """Balance an N x K positive matrix toward uniform prototype usage.

    Each round normalizes columns to sum N/K, then rows to sum 1, always
    ending on the row step so the output stays row-stochastic.
    """
    if probs.ndim != 2:
        raise ValueError("sinkhorn expects an (N, K) matrix")
    q = probs.clone()
    n, k = q.shape
    for _ in range(iterations):
        q = q / q.sum(dim=0, keepdim=True) * (n / k)
        q = q / q.sum(dim=1, keepdim=True)
    return q


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Shannon entropy -sum p ln p in nats, with 0 ln 0 == 0."""
    if (p < 0).any():
        raise ValueError("entropy requires non-negative probabilities")
    plogp = torch.where(p > 0, p * torch.log(p.clamp_min(LOG_CLAMP)), p.new_zeros(()))
    return -plogp.sum()


def cross_entropy(target_row: torch.Tensor, anchor_row: torch.Tensor) -> torch.Tensor:
    """H(t, a) = -sum t ln a, with a clamped below at 1e-12 before the log."""
    if target_row.shape != anchor_row.shape:
        raise ValueError("target and anchor rows must have equal shape")
    return -(target_row * torch.log(anchor_row.clamp_min(LOG_CLAMP))).sum()


def msn_loss(
    anchor_probs: torch.Tensor,
    target_probs: torch.Tensor,
    me_max_weight: float,
) -> LossBreakdown:
    """Assemble the full objective from grouped assignment probabilities.

    ``anchor_probs`` holds M * B rows, view-major (rows [m*B, (m+1)*B) are
    anchor view m of the whole batch); ``target_probs`` holds the B matching
    target rows. Targets are detached internally, so gradients reach only the
    anchor side.
    """
    if me_max_weight < 0:
        raise ValueError("me_max_weight must be >= 0")
    if anchor_probs.ndim != 2 or target_probs.ndim != 2:
        raise ValueError("probability matrices must be 2-D")
    b, k = target_probs.shape
    if anchor_probs.shape[1] != k or anchor_probs.shape[0] % b != 0:
        raise ValueError(
            f"anchor rows {tuple(anchor_probs.shape)} do not group as M x "
            f"{b} targets with {k} prototypes"
        )
    m = anchor_probs.shape[0] // b
    targets = target_probs.detach()

    anchors = anchor_probs.reshape(m, b, k)
    log_anchors = torch.log(anchors.clamp_min(LOG_CLAMP))
    ce = -(targets.unsqueeze(0) * log_anchors).sum(dim=2).mean()

    mean_pred = anchor_probs.mean(dim=0)
    me_max = entropy(mean_pred)
    total = ce - me_max_weight * me_max
    return LossBreakdown(ce, me_max, float(me_max_weight), total)
