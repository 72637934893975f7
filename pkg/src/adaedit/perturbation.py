"""Latent perturbation toward random noise, uniform or channel-selective.

The shift re-standardizes the inverted latent to the noise sample's
per-channel statistics (AdaIN) inside the edit region, blended with the
original at strength alpha. The channel-selective variant scales alpha per
channel by softmax importance weights derived from the per-channel gap
between the two latents' means over the edit tokens: channels whose
statistics differ most from noise carry the source-specific content and get
perturbed hardest, while near-noise channels (generic structure) are left
mostly intact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from .latent import (EPS_STD, Latent, channel_mean_over, resolve_tokens,
                     select_tokens)

PERTURBATION_MODES = ("uniform", "channel_selective")


@dataclass(frozen=True)
class ChannelWeights:
    """Per-channel importance weights, nonnegative with mean 1."""

    alpha: np.ndarray
    temperature: float

    def __post_init__(self):
        arr = np.asarray(self.alpha, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError(f"channel weights must be a length-C vector, got {arr.shape}")
        if np.any(arr < 0.0):
            raise ValueError("channel weights must be nonnegative")
        if abs(arr.mean() - 1.0) > 1e-9:
            raise ValueError(f"channel weights must have mean 1, got {arr.mean()!r}")
        if not self.temperature > 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "alpha", arr)

    @classmethod
    def uniform(cls, c: int, temperature: float = 1.0) -> "ChannelWeights":
        return cls(np.ones(c), temperature)


@dataclass(frozen=True)
class PerturbationConfig:
    alpha: float
    tau: float = 1.0
    mode: str = "channel_selective"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mode not in PERTURBATION_MODES:
            raise ValueError(f"mode must be one of {PERTURBATION_MODES}, got '{self.mode}'")


def adain(x: np.ndarray, y: np.ndarray, eps: float = EPS_STD) -> np.ndarray:
    """Re-standardize x to y's mean/std: sigma_y * (x - mu_x) / (sigma_x + eps) + mu_y.

    Statistics pool over the whole slice (population std). Constant x maps to
    mu_y thanks to the eps guard.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return y.std() * (x - x.mean()) / (x.std() + eps) + y.mean()


def _adain_per_channel(x: np.ndarray, y: np.ndarray, eps: float = EPS_STD) -> np.ndarray:
    # x, y: (B, S, C); stats pooled over batch x tokens, per channel
    mx = x.mean(axis=(0, 1))
    sx = x.std(axis=(0, 1))
    my = y.mean(axis=(0, 1))
    sy = y.std(axis=(0, 1))
    return sy * (x - mx) / (sx + eps) + my


def _check_pair(z_inv: Latent, z_rand: Latent) -> None:
    if z_inv.shape != z_rand.shape:
        raise ValueError(f"latent shape mismatch: {z_inv.shape} vs {z_rand.shape}")


def channel_gap(z_inv: Latent, z_rand: Latent, tokens: Iterable[int]) -> np.ndarray:
    """Absolute per-channel gap of means over the edit tokens; length C."""
    _check_pair(z_inv, z_rand)
    return np.abs(channel_mean_over(z_inv, tokens) - channel_mean_over(z_rand, tokens))


def channel_gap_global(z_inv: Latent, z_rand: Latent) -> np.ndarray:
    """Diagnostic variant of channel_gap computed over every token."""
    return channel_gap(z_inv, z_rand, range(z_inv.l))


def channel_weights(d: np.ndarray, tau: float) -> ChannelWeights:
    """Temperature-scaled softmax of the gap vector, rescaled to mean 1.

    Max-subtraction keeps the exponentials in range at any temperature. The
    (C * e) / sum(e) ordering makes a constant gap vector produce exactly 1.0
    per channel, so the uniform-recovery reduction is bitwise.
    """
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size < 1:
        raise ValueError(f"gap vector must be 1-d with length >= 1, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("gap vector must be finite")
    z = d / tau
    e = np.exp(z - z.max())
    alpha = (d.size * e) / e.sum()
    return ChannelWeights(alpha, tau)


def latents_shift_uniform(z_inv: Latent, z_rand: Latent, alpha: float,
                          tokens: Iterable[int]) -> Latent:
    """Blend AdaIN(z_inv, z_rand) into z_inv at strength alpha on the edit tokens.

    AdaIN statistics are computed over the edit-token subset only; off-set
    tokens are copied through bitwise. alpha = 0 returns z_inv unchanged.
    """
    _check_pair(z_inv, z_rand)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    idx = resolve_tokens(tokens, z_inv.l)
    out = z_inv.data.copy()
    if alpha > 0.0:
        x = select_tokens(z_inv, idx)
        y = select_tokens(z_rand, idx)
        out[:, idx, :] = alpha * _adain_per_channel(x, y) + (1.0 - alpha) * x
    return Latent(out)


def latents_shift_channel_selective(
        z_inv: Latent, z_rand: Latent, cfg: PerturbationConfig,
        tokens: Iterable[int]) -> Tuple[Latent, ChannelWeights]:
    """Per-channel blend at strength min(alpha * alpha_c, 1); returns weights used.

    Channels whose blend weight is 0 are copied through bitwise, so alpha = 0
    is the identity. A constant gap vector reduces exactly to the uniform
    shift.
    """
    _check_pair(z_inv, z_rand)
    idx = resolve_tokens(tokens, z_inv.l)
    d = channel_gap(z_inv, z_rand, idx)
    weights = channel_weights(d, cfg.tau)
    blend = np.minimum(cfg.alpha * weights.alpha, 1.0)
    out = z_inv.data.copy()
    if cfg.alpha > 0.0:
        x = select_tokens(z_inv, idx)
        y = select_tokens(z_rand, idx)
        mixed = blend * _adain_per_channel(x, y) + (1.0 - blend) * x
        out[:, idx, :] = np.where(blend > 0.0, mixed, x)
    return Latent(out), weights


def blend_weights(cfg: PerturbationConfig, weights: ChannelWeights) -> np.ndarray:
    """The clamped per-channel blend factors min(alpha * alpha_c, 1)."""
    return np.minimum(cfg.alpha * weights.alpha, 1.0)


def channel_report_rows(d: np.ndarray, weights: ChannelWeights,
                        cfg: PerturbationConfig) -> list:
    """Rows for the channel report CSV: (channel, d_c, alpha_c, blend_weight)."""
    blend = blend_weights(cfg, weights)
    return [
        (c, float(d[c]), float(weights.alpha[c]), float(blend[c]))
        for c in range(len(d))
    ]
