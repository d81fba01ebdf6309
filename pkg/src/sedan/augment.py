"""Stochastic sequence augmentations for contrastive decomposition learning.

Two families act on a feature sequence h of shape [m, d]: rolling, flipping,
and scaling leave periodic structure intact and build seasonal views;
jittering, window cropping, and window warping leave the long-run trend
intact and build trend views. All transforms keep the [m, d] shape (cropped
or warped sequences are linearly resampled back to length m) and they are
differentiable in h, so gradients reach the encoder through the views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

__all__ = [
    "AugmentParams",
    "rolling",
    "flipping",
    "scaling",
    "jittering",
    "window_crop",
    "window_warp",
    "compose_seasonal",
    "compose_trend",
]


@dataclass
class AugmentParams:
    """Ranges for the random draws made by the two composers.

    roll_max=None resolves to m//2 at call time. Setting roll_max=0, a
    degenerate scale range, jitter_sigma=0, crop_ratio_min=1, warp factor 1
    and allow_flip=False collapses both composers to the identity.
    """

    roll_max: int | None = None
    scale_low: float = 0.8
    scale_high: float = 1.2
    jitter_sigma: float = 0.03
    crop_ratio_min: float = 0.8
    warp_factors: tuple[float, ...] = (0.5, 2.0)
    warp_range_frac: float = 0.2
    allow_flip: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.crop_ratio_min <= 1.0):
            raise ValueError("crop_ratio_min must lie in (0, 1]")
        if self.scale_low <= 0 or self.scale_high < self.scale_low:
            raise ValueError("scale range must satisfy 0 < low <= high")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be nonnegative")
        if self.roll_max is not None and self.roll_max < 0:
            raise ValueError("roll_max must be nonnegative")
        if any(f <= 0 for f in self.warp_factors):
            raise ValueError("warp factors must be positive")
        if not (0.0 < self.warp_range_frac <= 1.0):
            raise ValueError("warp_range_frac must lie in (0, 1]")


def _check_sequence(h: Tensor) -> int:
    if h.ndim != 2:
        raise ValueError(f"expected a [m, d] sequence, got shape {tuple(h.shape)}")
    return h.shape[0]


def rolling(h: Tensor, r: int) -> Tensor:
    """Circular shift along time: h'_i = h_{(i - r) mod m}."""
    m = _check_sequence(h)
    if not (0 <= r < m):
        raise ValueError(f"roll amount {r} out of range [0, {m})")
    return torch.roll(h, shifts=r, dims=0)


def flipping(h: Tensor) -> Tensor:
    """Reverse along time: h'_i = h_{m-i-1}."""
    _check_sequence(h)
    return torch.flip(h, dims=[0])


def scaling(h: Tensor, eps_s: float) -> Tensor:
    """Multiply every element by eps_s > 0."""
    _check_sequence(h)
    if eps_s <= 0:
        raise ValueError("scale factor must be positive")
    return h * eps_s


def jittering(h: Tensor, sigma: float, generator: torch.Generator) -> Tensor:
    """Add i.i.d. N(0, sigma^2) noise to every element."""
    _check_sequence(h)
    if sigma < 0:
        raise ValueError("jitter sigma must be nonnegative")
    noise = torch.randn(h.shape, generator=generator, dtype=h.dtype, device=h.device)
    return h + sigma * noise


def _linear_resample(h: Tensor, new_len: int) -> Tensor:
    """Resample [L, d] to [new_len, d] by linear interpolation over the index
    axis. Exact identity when new_len == L."""
    length = h.shape[0]
    if new_len == length:
        return h.clone()
    if length == 1:
        return h.expand(new_len, h.shape[1]).clone()
    pos = torch.linspace(0.0, length - 1.0, new_len, dtype=h.dtype, device=h.device)
    lo = pos.floor().long().clamp(max=length - 2)
    frac = (pos - lo.to(h.dtype)).unsqueeze(1)
    return (1.0 - frac) * h[lo] + frac * h[lo + 1]


def window_crop(h: Tensor, keep_len: int, start: int) -> Tensor:
    """Keep the contiguous slice [start, start + keep_len) and stretch it
    back to the original length."""
    m = _check_sequence(h)
    if not (1 <= keep_len <= m):
        raise ValueError(f"keep_len {keep_len} out of range [1, {m}]")
    if not (0 <= start <= m - keep_len):
        raise ValueError(f"crop start {start} out of range [0, {m - keep_len}]")
    return _linear_resample(h[start : start + keep_len], m)


def window_warp(h: Tensor, range_start: int, range_len: int, factor: float) -> Tensor:
    """Stretch or compress the slice [range_start, range_start + range_len)
    by `factor`, keep the surrounding segments, and resample to length m."""
    m = _check_sequence(h)
    if range_len < 1:
        raise ValueError("warp range must be nonempty")
    if not (0 <= range_start <= m - range_len):
        raise ValueError(
            f"warp range [{range_start}, {range_start + range_len}) out of bounds"
        )
    if factor <= 0:
        raise ValueError("warp factor must be positive")
    if factor == 1.0:
        return h.clone()
    left = h[:range_start]
    mid = h[range_start : range_start + range_len]
    right = h[range_start + range_len :]
    warped = _linear_resample(mid, max(1, round(range_len * factor)))
    return _linear_resample(torch.cat([left, warped, right], dim=0), m)


def _nonempty_subset(size: int, generator: torch.Generator) -> list[bool]:
    # Uniform over the 2^size - 1 nonempty subsets.
    mask = int(torch.randint(1, 2**size, (1,), generator=generator).item())
    return [(mask >> i) & 1 == 1 for i in range(size)]


def _rand_int(low: int, high: int, generator: torch.Generator) -> int:
    # inclusive bounds
    return int(torch.randint(low, high + 1, (1,), generator=generator).item())


def _rand_uniform(low: float, high: float, generator: torch.Generator) -> float:
    return low + (high - low) * float(torch.rand(1, generator=generator).item())


def compose_seasonal(h: Tensor, params: AugmentParams, generator: torch.Generator) -> Tensor:
    """Apply a uniformly random nonempty subset of the periodicity-preserving
    transforms, in the fixed order roll -> flip -> scale."""
    m = _check_sequence(h)
    ops = ["roll", "scale"] if not params.allow_flip else ["roll", "flip", "scale"]
    chosen = _nonempty_subset(len(ops), generator)
    selected = {op for op, keep in zip(ops, chosen) if keep}
    out = h
    if "roll" in selected:
        roll_max = params.roll_max if params.roll_max is not None else m // 2
        out = rolling(out, _rand_int(0, min(roll_max, m - 1), generator))
    if "flip" in selected:
        out = flipping(out)
    if "scale" in selected:
        out = scaling(out, _rand_uniform(params.scale_low, params.scale_high, generator))
    return out


def compose_trend(h: Tensor, params: AugmentParams, generator: torch.Generator) -> Tensor:
    """Apply a uniformly random nonempty subset of the trend-preserving
    transforms, in the fixed order jitter -> crop -> warp."""
    m = _check_sequence(h)
    chosen = _nonempty_subset(3, generator)
    selected = {op for op, keep in zip(("jitter", "crop", "warp"), chosen) if keep}
    out = h
    if "jitter" in selected:
        out = jittering(out, params.jitter_sigma, generator)
    if "crop" in selected:
        keep_len = _rand_int(max(1, math.ceil(params.crop_ratio_min * m)), m, generator)
        start = _rand_int(0, m - keep_len, generator)
        out = window_crop(out, keep_len, start)
    if "warp" in selected:
        factor = params.warp_factors[_rand_int(0, len(params.warp_factors) - 1, generator)]
        range_len = max(1, round(params.warp_range_frac * m))
        start = _rand_int(0, m - range_len, generator)
        out = window_warp(out, start, range_len, factor)
    return out
