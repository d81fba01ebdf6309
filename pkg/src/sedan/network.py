"""Forecasting backbone: per-domain embeddings, a vanilla transformer
encoder/decoder, the seasonal and trend decomposition generators with their
momentum copies, and the reconstructor that merges the components back into
the decoder's memory.

Source and target domains own their input embeddings and output heads;
the encoder, decoder trunk, generators, and reconstructor are shared so the
adaptation losses act in one feature space. At inference only the target
embedding/head (plus the shared trunk) is exercised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = [
    "ModelConfig",
    "DecomposedFeatures",
    "causal_mean",
    "momentum_update",
    "PositionalEncoding",
    "InputEmbedding",
    "SeasonalGenerator",
    "TrendGenerator",
    "Reconstructor",
    "SedanNetwork",
]

DOMAINS = ("source", "target")


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 1
    d_ff: int = 64
    dropout: float = 0.05
    d_in_source: int = 7
    d_in_target: int = 7
    d_out_source: int = 7
    d_out_target: int = 7
    d_time_source: int = 4
    d_time_target: int = 4
    tdg_kernel: int = 3
    tdg_pool: int = 3
    sdg_hidden: int = 64
    momentum: float = 0.999

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        widths = (
            self.d_model, self.n_heads, self.enc_layers, self.dec_layers, self.d_ff,
            self.d_in_source, self.d_in_target, self.d_out_source, self.d_out_target,
            self.d_time_source, self.d_time_target, self.tdg_kernel, self.tdg_pool,
            self.sdg_hidden,
        )
        if any(w < 1 for w in widths):
            raise ValueError("all widths and layer counts must be >= 1")
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError("momentum must lie in [0, 1]")


@dataclass
class DecomposedFeatures:
    seasonal: Tensor  # [B, l_x, d_model]
    trend: Tensor  # [B, l_x, d_model]
    reconstructed: Tensor  # [B, l_x, d_model]


def causal_mean(x: Tensor, window: int) -> Tensor:
    """Left-aligned running mean over the time axis of [B, L, D]: output at
    step i averages steps max(0, i-window+1)..i, so no future step leaks in
    and a constant sequence stays exactly constant."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return x
    b, length, d = x.shape
    cs = x.cumsum(dim=1)
    shifted = torch.zeros_like(cs)
    if length > window:
        shifted[:, window:] = cs[:, :-window]
    sums = cs - shifted
    counts = torch.arange(1, length + 1, device=x.device, dtype=x.dtype).clamp(
        max=window
    )
    return sums / counts.view(1, length, 1)


def momentum_update(
    online_params, momentum_params, m: float
) -> None:
    """In-place exponential update: momentum <- m * momentum + (1-m) * online."""
    online = list(online_params)
    momentum = list(momentum_params)
    if len(online) != len(momentum):
        raise ValueError("parameter lists are not congruent")
    with torch.no_grad():
        for p_o, p_m in zip(online, momentum):
            if p_o.shape != p_m.shape:
                raise ValueError(
                    f"parameter shape mismatch: {tuple(p_o.shape)} vs {tuple(p_m.shape)}"
                )
            p_m.mul_(m).add_(p_o, alpha=1.0 - m)


class PositionalEncoding(nn.Module):
    def __init__(self, d_model: int, max_len: int = 4096):
        super().__init__()
        pe = torch.zeros(max_len, d_model)
        position = torch.arange(0, max_len, dtype=torch.float).unsqueeze(1)
        div_term = torch.exp(
            torch.arange(0, d_model, 2).float() * (-math.log(10000.0) / d_model)
        )
        pe[:, 0::2] = torch.sin(position * div_term)
        pe[:, 1::2] = torch.cos(position * div_term[: pe[:, 1::2].shape[1]])
        self.register_buffer("pe", pe)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.pe[: x.shape[1]].to(x.dtype)


class InputEmbedding(nn.Module):
    """Value projection + time-stamp projection + sinusoidal position code.

    Both projections are bias-free, so a zero window embeds to the position
    code alone.
    """

    def __init__(self, d_in: int, d_time: int, d_model: int, dropout: float):
        super().__init__()
        self.value_proj = nn.Linear(d_in, d_model, bias=False)
        self.time_proj = nn.Linear(d_time, d_model, bias=False)
        self.position = PositionalEncoding(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, values: Tensor, time_feats: Tensor) -> Tensor:
        if values.shape[-1] != self.value_proj.in_features:
            raise ValueError(
                f"expected {self.value_proj.in_features} input dims, "
                f"got {values.shape[-1]}"
            )
        if time_feats.shape[-1] != self.time_proj.in_features:
            raise ValueError(
                f"expected {self.time_proj.in_features} time dims, "
                f"got {time_feats.shape[-1]}"
            )
        out = self.position(self.value_proj(values)) + self.time_proj(time_feats)
        return self.dropout(out)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(
            cfg.d_model, cfg.n_heads, dropout=cfg.dropout, batch_first=True
        )
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        attn_out, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + self.dropout(attn_out))
        ff = self.ff2(self.dropout(F.relu(self.ff1(x))))
        return self.norm2(x + self.dropout(ff))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(
            cfg.d_model, cfg.n_heads, dropout=cfg.dropout, batch_first=True
        )
        self.cross_attn = nn.MultiheadAttention(
            cfg.d_model, cfg.n_heads, dropout=cfg.dropout, batch_first=True
        )
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, memory: Tensor, causal_mask: Tensor) -> Tensor:
        attn_out, _ = self.self_attn(
            x, x, x, attn_mask=causal_mask, need_weights=False
        )
        x = self.norm1(x + self.dropout(attn_out))
        cross_out, _ = self.cross_attn(x, memory, memory, need_weights=False)
        x = self.norm2(x + self.dropout(cross_out))
        ff = self.ff2(self.dropout(F.relu(self.ff1(x))))
        return self.norm3(x + self.dropout(ff))


class SeasonalGenerator(nn.Module):
    """Position-wise two-layer perceptron extracting the seasonal component."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, hidden), nn.ReLU(), nn.Linear(hidden, d_model)
        )

    def forward(self, h: Tensor) -> Tensor:
        return self.net(h)


class TrendGenerator(nn.Module):
    """Causal convolution over time followed by a left-aligned running mean,
    imitating a trend smoothing pass. Strictly causal: the output at step i
    depends only on inputs at steps <= i."""

    def __init__(self, d_model: int, kernel: int, pool: int):
        super().__init__()
        self.kernel = kernel
        self.pool = pool
        self.conv = nn.Conv1d(d_model, d_model, kernel)

    def forward(self, h: Tensor) -> Tensor:
        x = h.transpose(1, 2)  # [B, D, L]
        x = F.pad(x, (self.kernel - 1, 0))
        x = self.conv(x).transpose(1, 2)
        return causal_mean(x, self.pool)


class Reconstructor(nn.Module):
    """Position-wise perceptron merging [seasonal; trend] back to width d_model."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * d_model, hidden), nn.ReLU(), nn.Linear(hidden, d_model)
        )

    def forward(self, seasonal: Tensor, trend: Tensor) -> Tensor:
        if seasonal.shape != trend.shape:
            raise ValueError(
                f"component shape mismatch: {tuple(seasonal.shape)} vs "
                f"{tuple(trend.shape)}"
            )
        return self.net(torch.cat([seasonal, trend], dim=-1))


class SedanNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_embed = nn.ModuleDict(
            {
                "source": InputEmbedding(
                    cfg.d_in_source, cfg.d_time_source, cfg.d_model, cfg.dropout
                ),
                "target": InputEmbedding(
                    cfg.d_in_target, cfg.d_time_target, cfg.d_model, cfg.dropout
                ),
            }
        )
        self.dec_embed = nn.ModuleDict(
            {
                "source": InputEmbedding(
                    cfg.d_in_source, cfg.d_time_source, cfg.d_model, cfg.dropout
                ),
                "target": InputEmbedding(
                    cfg.d_in_target, cfg.d_time_target, cfg.d_model, cfg.dropout
                ),
            }
        )
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.heads = nn.ModuleDict(
            {
                "source": nn.Linear(cfg.d_model, cfg.d_out_source),
                "target": nn.Linear(cfg.d_model, cfg.d_out_target),
            }
        )
        self.sdg = SeasonalGenerator(cfg.d_model, cfg.sdg_hidden)
        self.tdg = TrendGenerator(cfg.d_model, cfg.tdg_kernel, cfg.tdg_pool)
        self.reconstructor = Reconstructor(cfg.d_model, cfg.sdg_hidden)
        self.moco_sdg = SeasonalGenerator(cfg.d_model, cfg.sdg_hidden)
        self.moco_tdg = TrendGenerator(cfg.d_model, cfg.tdg_kernel, cfg.tdg_pool)
        self._sync_momentum_copies()

    def _sync_momentum_copies(self) -> None:
        self.moco_sdg.load_state_dict(self.sdg.state_dict())
        self.moco_tdg.load_state_dict(self.tdg.state_dict())
        for p in self.moco_sdg.parameters():
            p.requires_grad_(False)
        for p in self.moco_tdg.parameters():
            p.requires_grad_(False)

    def online_parameters(self):
        """Everything the optimizer should touch (momentum copies excluded)."""
        return (p for p in self.parameters() if p.requires_grad)

    @staticmethod
    def _check_domain(domain: str) -> None:
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")

    def embed(self, values: Tensor, time_feats: Tensor, domain: str) -> Tensor:
        self._check_domain(domain)
        return self.enc_embed[domain](values, time_feats)

    def encode(self, tokens: Tensor) -> Tensor:
        if not torch.isfinite(tokens).all():
            raise ValueError("encoder input contains non-finite values")
        h = tokens
        for layer in self.encoder:
            h = layer(h)
        return h

    def decompose(self, h: Tensor) -> DecomposedFeatures:
        seasonal = self.sdg(h)
        trend = self.tdg(h)
        reconstructed = self.reconstructor(seasonal, trend)
        return DecomposedFeatures(seasonal, trend, reconstructed)

    def decode(
        self,
        memory: Tensor,
        dec_input: Tensor,
        dec_time: Tensor,
        domain: str,
        pred_len: int,
    ) -> Tensor:
        self._check_domain(domain)
        x = self.dec_embed[domain](dec_input, dec_time)
        length = x.shape[1]
        if pred_len > length:
            raise ValueError("prediction length exceeds decoder input length")
        causal_mask = torch.triu(
            torch.ones(length, length, dtype=torch.bool, device=x.device), diagonal=1
        )
        for layer in self.decoder:
            x = layer(x, memory, causal_mask)
        out = self.heads[domain](x)
        return out[:, -pred_len:, :]

    def momentum_step(self) -> None:
        m = self.cfg.momentum
        momentum_update(self.sdg.parameters(), self.moco_sdg.parameters(), m)
        momentum_update(self.tdg.parameters(), self.moco_tdg.parameters(), m)

    def forecast(
        self,
        enc_input: Tensor,
        enc_time: Tensor,
        dec_input: Tensor,
        dec_time: Tensor,
        domain: str,
        pred_len: int,
        *,
        use_decomposition: bool = True,
    ):
        """Full forward pass. With decomposition the decoder reads the
        reconstructed features; without it (baseline wiring) it reads the
        encoder features directly. Returns (forecast, H, components-or-None).
        """
        h = self.encode(self.embed(enc_input, enc_time, domain))
        if use_decomposition:
            comp = self.decompose(h)
            memory = comp.reconstructed
        else:
            comp = None
            memory = h
        y_hat = self.decode(memory, dec_input, dec_time, domain, pred_len)
        return y_hat, h, comp
