"""Contrastive supervision for the decomposition generators.

Queries come from the online generator applied to one random view of a
feature sequence; positive keys come from the slowly-updated momentum copy
applied to an independent view. Negatives are drawn from a fixed-capacity
memory bank of unit-norm keys. When a full bank would discard a key, the
discarded key is first fused into its most similar surviving prototype
(weighted by the update ratio) before the incoming key takes its slot, so
old negatives keep contributing instead of vanishing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

from .augment import AugmentParams, compose_seasonal, compose_trend

__all__ = [
    "ContrastConfig",
    "MemoryBank",
    "summarize",
    "info_nce",
    "sample_negatives",
    "opu_enqueue",
    "make_keys",
    "seasonal_contrast_loss",
    "trend_contrast_loss",
    "kl_reconstruction",
    "decomposition_loss",
]

_UNIT_TOL = 1e-6


@dataclass
class ContrastConfig:
    tau: float = 0.07
    k_negatives: int = 64
    bank_capacity: int = 256
    beta: float = 0.5  # prototype fusion ratio

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("update ratio must lie in [0, 1]")
        if self.k_negatives > self.bank_capacity:
            raise ValueError("cannot sample more negatives than the bank holds")


class MemoryBank:
    """Fixed-capacity queue of unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.keys = torch.zeros(capacity, dim, dtype=dtype)
        self.filled = 0
        self.cursor = 0

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]

    @property
    def is_full(self) -> bool:
        return self.filled == self.capacity

    def clone(self) -> "MemoryBank":
        other = MemoryBank(self.capacity, self.keys.shape[1], self.keys.dtype)
        other.keys = self.keys.clone()
        other.filled = self.filled
        other.cursor = self.cursor
        return other

    def state_dict(self) -> dict:
        return {"keys": self.keys.clone(), "filled": self.filled, "cursor": self.cursor}

    def load_state_dict(self, state: dict) -> None:
        self.keys = state["keys"].clone()
        self.filled = int(state["filled"])
        self.cursor = int(state["cursor"])


def summarize(features: Tensor) -> Tensor:
    """Mean-pool a [m, d] (or [batch, m, d]) feature sequence over time and
    L2-normalize. The all-zero sequence has no direction and is rejected."""
    if features.ndim not in (2, 3):
        raise ValueError(f"expected [m, d] or [B, m, d], got {tuple(features.shape)}")
    pooled = features.mean(dim=-2)
    norm = pooled.norm(dim=-1, keepdim=True)
    if (norm < 1e-12).any():
        raise ValueError("cannot summarize an all-zero feature sequence")
    return pooled / norm


def info_nce(q: Tensor, k_pos: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """-log of the softmax weight the positive key gets among the negatives,
    at temperature tau. Inputs are unit-norm vectors.

    Evaluated as softplus(logsumexp(neg) - pos), which keeps full precision
    when the positive logit dominates (plain logsumexp would round the loss
    to zero there).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if q.ndim != 1:
        raise ValueError("info_nce expects a single query vector")
    pos_logit = (q * k_pos).sum() / tau
    neg_logits = negatives @ q / tau
    return F.softplus(torch.logsumexp(neg_logits, dim=0) - pos_logit)


def _check_unit(keys: Tensor) -> None:
    norms = keys.norm(dim=-1)
    if (norms - 1.0).abs().max() > _UNIT_TOL:
        raise ValueError("memory bank keys must be unit-norm")


def sample_negatives(bank: MemoryBank, k: int, generator: torch.Generator) -> Tensor:
    """Draw k distinct keys uniformly without replacement from the filled
    slots. The caller is responsible for warming the bank first."""
    if bank.filled < k:
        raise ValueError(
            f"bank holds {bank.filled} keys but {k} negatives were requested"
        )
    idx = torch.randperm(bank.filled, generator=generator)[:k]
    return bank.keys[idx].clone()


def opu_enqueue(bank: MemoryBank, new_keys: Tensor, beta: float) -> MemoryBank:
    """Enqueue unit-norm keys. While the bank fills, this is a plain queue.
    Once full, the key about to be displaced is fused into its most similar
    surviving prototype, (1-beta) * prototype + beta * displaced, renormalized,
    and the incoming key takes the displaced slot."""
    if new_keys.ndim == 1:
        new_keys = new_keys.unsqueeze(0)
    _check_unit(new_keys)
    new_keys = new_keys.detach().to(bank.keys.dtype)
    for key in new_keys:
        if not bank.is_full:
            bank.keys[bank.cursor] = key
            bank.filled += 1
        else:
            displaced = bank.keys[bank.cursor].clone()
            sims = bank.keys @ displaced
            sims[bank.cursor] = -torch.inf  # prototype must be a surviving key
            proto = int(sims.argmax().item())
            fused = (1.0 - beta) * bank.keys[proto] + beta * displaced
            norm = fused.norm()
            if norm > 1e-7:  # antipodal keys at beta=0.5 cancel; keep prototype
                bank.keys[proto] = fused / norm
            bank.keys[bank.cursor] = key
        bank.cursor = (bank.cursor + 1) % bank.capacity
    return bank


def make_keys(
    h_batch: Tensor,
    momentum_net: torch.nn.Module,
    compose_fn: Callable[[Tensor, AugmentParams, torch.Generator], Tensor],
    params: AugmentParams,
    generator: torch.Generator,
) -> Tensor:
    """Positive keys: an independent random view of each sequence pushed
    through the momentum generator, summarized to unit vectors. No gradient."""
    views = torch.stack([compose_fn(h, params, generator) for h in h_batch])
    with torch.no_grad():
        return summarize(momentum_net(views))


def _contrast_loss(
    h_batch: Tensor,
    online_net: torch.nn.Module,
    momentum_net: torch.nn.Module,
    bank: MemoryBank,
    compose_fn,
    aug_params: AugmentParams,
    cfg: ContrastConfig,
    generator: torch.Generator,
) -> Tensor:
    if h_batch.ndim != 3:
        raise ValueError(f"expected [B, m, d], got {tuple(h_batch.shape)}")
    if bank.filled < cfg.k_negatives:
        raise ValueError("memory bank is cold; warm it up before contrasting")
    query_views = torch.stack([compose_fn(h, aug_params, generator) for h in h_batch])
    queries = summarize(online_net(query_views))
    keys = make_keys(h_batch, momentum_net, compose_fn, aug_params, generator)
    losses = []
    for q, k_pos in zip(queries, keys):
        negatives = sample_negatives(bank, cfg.k_negatives, generator)
        losses.append(info_nce(q, k_pos, negatives, cfg.tau))
    loss = torch.stack(losses).mean()
    opu_enqueue(bank, keys, cfg.beta)
    return loss


def seasonal_contrast_loss(
    h_batch: Tensor,
    sdg: torch.nn.Module,
    moco_sdg: torch.nn.Module,
    bank_sea: MemoryBank,
    aug_params: AugmentParams,
    cfg: ContrastConfig,
    generator: torch.Generator,
) -> Tensor:
    """Batch-mean infoNCE for the seasonal generator; the step's positive
    keys are enqueued into the seasonal bank after the loss."""
    return _contrast_loss(
        h_batch, sdg, moco_sdg, bank_sea, compose_seasonal, aug_params, cfg, generator
    )


def trend_contrast_loss(
    h_batch: Tensor,
    tdg: torch.nn.Module,
    moco_tdg: torch.nn.Module,
    bank_tre: MemoryBank,
    aug_params: AugmentParams,
    cfg: ContrastConfig,
    generator: torch.Generator,
) -> Tensor:
    """Trend-side counterpart of seasonal_contrast_loss."""
    return _contrast_loss(
        h_batch, tdg, moco_tdg, bank_tre, compose_trend, aug_params, cfg, generator
    )


def kl_reconstruction(h: Tensor, h_tilde: Tensor) -> Tensor:
    """Mean KL divergence between per-step channel softmaxes of the original
    and reconstructed feature sequences. Zero iff the softmax rows agree."""
    if h.shape != h_tilde.shape:
        raise ValueError(
            f"shape mismatch: {tuple(h.shape)} vs {tuple(h_tilde.shape)}"
        )
    p = F.softmax(h, dim=-1)
    log_p = F.log_softmax(h, dim=-1)
    log_q = F.log_softmax(h_tilde, dim=-1)
    return (p * (log_p - log_q)).sum(dim=-1).mean()


def decomposition_loss(
    h_batch: Tensor,
    h_tilde: Tensor,
    sdg: torch.nn.Module,
    moco_sdg: torch.nn.Module,
    tdg: torch.nn.Module,
    moco_tdg: torch.nn.Module,
    bank_sea: MemoryBank,
    bank_tre: MemoryBank,
    aug_params: AugmentParams,
    cfg: ContrastConfig,
    generator: torch.Generator,
):
    """Per-domain decomposition objective: seasonal contrast + trend contrast
    + KL reconstruction. Returns (total, parts)."""
    l_sea = seasonal_contrast_loss(
        h_batch, sdg, moco_sdg, bank_sea, aug_params, cfg, generator
    )
    l_tre = trend_contrast_loss(
        h_batch, tdg, moco_tdg, bank_tre, aug_params, cfg, generator
    )
    l_kl = kl_reconstruction(h_batch, h_tilde)
    total = l_sea + l_tre + l_kl
    return total, {"seasonal": l_sea, "trend": l_tre, "kl": l_kl}
