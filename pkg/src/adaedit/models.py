"""Velocity fields: an analytic linear flow and a seeded toy attention network.

The analytic flow v = a*z + b has a closed-form trajectory and serves as the
integration oracle. The toy network stands in for a full text-to-image
transformer backbone: fixed seeded weights, single-stream attention blocks
over concatenated text + image tokens, and hooks that let a pipeline record
per-layer keys/values during inversion and re-inject them (convex-blended
with the current ones) during sampling. No parameter is ever trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CacheMissError
from .latent import STREAM_MODEL, Latent, SeededRng

HOOK_MODES = ("record", "inject", "off")


@dataclass(frozen=True)
class Conditioning:
    """Prompt token ids plus the index of the keyword steering the edit."""

    prompt_token_ids: Tuple[int, ...]
    keyword_index: int

    def __post_init__(self):
        ids = tuple(int(t) for t in self.prompt_token_ids)
        if len(ids) < 1:
            raise ValueError("prompt must contain at least one token")
        if any(t < 0 for t in ids):
            raise ValueError(f"prompt token ids must be nonnegative, got {ids}")
        if not 0 <= self.keyword_index < len(ids):
            raise ValueError(
                f"keyword_index {self.keyword_index} out of range [0, {len(ids)})")
        object.__setattr__(self, "prompt_token_ids", ids)


class KVCache:
    """Cached attention keys/values keyed by (sampling-step index, layer)."""

    def __init__(self):
        self._entries: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def has(self, step: int, layer: int) -> bool:
        return (step, layer) in self._entries

    def put(self, step: int, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        key = (step, layer)
        if key in self._entries:
            raise ValueError(f"duplicate cache entry for step={step}, layer={layer}")
        k = np.array(k, dtype=np.float64, copy=True)
        v = np.array(v, dtype=np.float64, copy=True)
        k.flags.writeable = False
        v.flags.writeable = False
        self._entries[key] = (k, v)

    def get(self, step: int, layer: int) -> Tuple[np.ndarray, np.ndarray]:
        try:
            return self._entries[(step, layer)]
        except KeyError:
            raise CacheMissError(step, layer) from None

    def steps(self) -> tuple:
        return tuple(sorted({s for s, _ in self._entries}))


class AttentionRecord:
    """Text-to-image attention blocks recorded during inversion.

    One entry per (step, layer): an array (B, heads, L_txt, L_img) holding the
    attention each text token pays to each image token. Later puts for an
    existing key are ignored so only a step's first evaluation contributes.
    """

    def __init__(self):
        self._maps: Dict[Tuple[int, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._maps)

    def has(self, step: int, layer: int) -> bool:
        return (step, layer) in self._maps

    def put(self, step: int, layer: int, block: np.ndarray) -> None:
        key = (step, layer)
        if key not in self._maps:
            self._maps[key] = np.array(block, dtype=np.float64, copy=True)

    def stacked(self) -> np.ndarray:
        if not self._maps:
            raise RuntimeError("no attention maps recorded")
        keys = sorted(self._maps)
        return np.stack([self._maps[k] for k in keys], axis=0)


@dataclass(frozen=True)
class EditMask:
    """Soft per-image-token edit weights in [0, 1]; hard set = soft >= 0.5."""

    soft: np.ndarray
    hard: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.soft, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError(f"mask must be a 1-d vector, got shape {arr.shape}")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("mask weights must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "soft", arr)
        object.__setattr__(self, "hard", tuple(int(i) for i in np.flatnonzero(arr >= 0.5)))


@dataclass
class InjectionHooks:
    """Per-step instructions for the attention K/V interception.

    record: store each layer's K/V (and text-to-image attention when a sink is
    attached) under (step, layer); repeated evaluations within one solver step
    keep the first recording. inject: replace K/V with the kv_mix blend of the
    cached source features before attention. off: no cache interaction.
    """

    mode: str
    cache: Optional[KVCache] = None
    step: int = 0
    mix_ratios: Optional[Tuple[float, ...]] = None
    background_mask: Optional[EditMask] = None
    global_mix: bool = False
    attn_sink: Optional[AttentionRecord] = None

    def __post_init__(self):
        if self.mode not in HOOK_MODES:
            raise ValueError(f"hook mode must be one of {HOOK_MODES}, got '{self.mode}'")
        if self.mode in ("record", "inject") and self.cache is None:
            raise ValueError(f"{self.mode} mode requires a cache")
        if self.mode == "inject" and self.mix_ratios is None:
            raise ValueError("inject mode requires per-layer mix ratios")


@dataclass(frozen=True)
class AnalyticLinearFlow:
    """v(z, t) = decay * z + drift (drift broadcast over tokens); closed form known."""

    decay: float
    drift: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.drift, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"drift must be a length-C vector, got shape {arr.shape}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "drift", arr)

    def evaluate(self, z: Latent, t: float, cond=None, hooks=None) -> Latent:
        return Latent(self.decay * z.data + self.drift)

    def closed_form(self, z0: Latent, t0: float, t1: float) -> Latent:
        """Exact solution of dz/dt = a*z + b from t0 to t1."""
        dt = t1 - t0
        if self.decay == 0.0:
            return Latent(z0.data + self.drift * dt)
        g = math.exp(self.decay * dt)
        return Latent(g * z0.data + (self.drift / self.decay) * (g - 1.0))


def kv_mix(k_src: np.ndarray, v_src: np.ndarray, k_tgt: np.ndarray, v_tgt: np.ndarray,
           ratio: float, mask: Optional[EditMask] = None,
           global_mix: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Convex blend ratio*src + (1-ratio)*tgt of cached and current K/V.

    With global_mix (or no mask) the ratio applies to every row. Otherwise the
    image rows -- the trailing len(mask.soft) rows -- are mixed at the
    background weight ratio * (1 - soft), leaving edit tokens free, and text
    rows always keep the target features so the target prompt stays in
    control. Ratio 0 returns the target arrays bitwise.
    """
    if not (k_src.shape == v_src.shape == k_tgt.shape == v_tgt.shape):
        raise ValueError("K/V shape mismatch between source and target")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    if ratio == 0.0:
        return k_tgt, v_tgt
    if global_mix or mask is None:
        if ratio == 1.0:
            return k_src, v_src
        k = ratio * k_src + (1.0 - ratio) * k_tgt
        v = ratio * v_src + (1.0 - ratio) * v_tgt
        return k, v
    n_img = mask.soft.size
    n_rows = k_tgt.shape[-2]
    if n_img > n_rows:
        raise ValueError(f"mask covers {n_img} rows but K/V have only {n_rows}")
    row_ratio = np.zeros(n_rows)
    row_ratio[n_rows - n_img:] = ratio * (1.0 - mask.soft)
    if not row_ratio.any():
        return k_tgt, v_tgt
    r = row_ratio[:, None]
    k = r * k_src + (1.0 - r) * k_tgt
    v = r * v_src + (1.0 - r) * v_tgt
    return k, v


class ToyAttentionFlow:
    """Seeded stand-in for a transformer flow backbone.

    Image tokens are projected into the embedding space, concatenated after
    the prompt's embedded text tokens, mixed with a sinusoidal time embedding,
    passed through residual single-stream attention blocks, and projected back
    to channel space as the velocity. All weights come from one Philox stream
    in a fixed draw order, so a seed pins the model.

    Parameters are immutable after construction and evaluate() is pure except
    for cache/sink writes in record mode; a cache belongs to exactly one
    pipeline run, and concurrent runs use separate caches.
    """

    def __init__(self, seed: int = 0, layer_count: int = 2, embed_dim: int = 32,
                 img_tokens: int = 16, text_tokens: int = 4, channels: int = 8,
                 heads: int = 1, vocab_size: int = 64, time_freqs: int = 8):
        if min(layer_count, embed_dim, img_tokens, text_tokens,
               channels, heads, vocab_size, time_freqs) < 1:
            raise ValueError("all model dimensions must be positive")
        if embed_dim % heads != 0:
            raise ValueError(f"embed_dim {embed_dim} must be divisible by heads {heads}")
        self.seed = int(seed)
        self.layer_count = layer_count
        self.embed_dim = embed_dim
        self.img_tokens = img_tokens
        self.text_tokens = text_tokens
        self.channels = channels
        self.heads = heads
        self.vocab_size = vocab_size
        self.time_freqs = time_freqs

        rng = SeededRng(seed, stream=STREAM_MODEL)
        d = embed_dim
        # Draw order is part of the model definition; do not reorder.
        self.token_table = rng.standard_normal((vocab_size, d)) / math.sqrt(d)
        self.w_in = rng.standard_normal((channels, d)) / math.sqrt(channels)
        t_in = d + 2 * time_freqs
        self.w_time = rng.standard_normal((t_in, d)) / math.sqrt(t_in)
        self.layers = []
        for _ in range(layer_count):
            self.layers.append({
                name: rng.standard_normal((d, d)) / math.sqrt(d)
                for name in ("wq", "wk", "wv", "wo")
            })
        self.w_out = rng.standard_normal((d, channels)) / math.sqrt(d)

    def _time_features(self, t: float) -> np.ndarray:
        freqs = 2.0 ** np.arange(self.time_freqs)
        angles = math.pi * t * freqs
        return np.concatenate([np.sin(angles), np.cos(angles)])

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def _forward(self, z: Latent, t: float, cond: Conditioning,
                 hooks: Optional[InjectionHooks],
                 collect_attn: bool) -> Tuple[np.ndarray, list]:
        if z.l != self.img_tokens or z.c != self.channels:
            raise ValueError(
                f"latent shape {z.shape} incompatible with model "
                f"(L={self.img_tokens}, C={self.channels})")
        if len(cond.prompt_token_ids) != self.text_tokens:
            raise ValueError(
                f"prompt length {len(cond.prompt_token_ids)} != text_tokens "
                f"{self.text_tokens}")
        if any(tid >= self.vocab_size for tid in cond.prompt_token_ids):
            raise ValueError(f"prompt token id >= vocab_size {self.vocab_size}")

        b = z.b
        txt = np.broadcast_to(
            self.token_table[list(cond.prompt_token_ids)],
            (b, self.text_tokens, self.embed_dim))
        img = z.data @ self.w_in
        h = np.concatenate([txt, img], axis=1)
        tf = np.broadcast_to(self._time_features(t), h.shape[:2] + (2 * self.time_freqs,))
        h = np.concatenate([h, tf], axis=-1) @ self.w_time

        maps = []
        scale = 1.0 / math.sqrt(self.embed_dim // self.heads)
        for layer_idx, layer in enumerate(self.layers):
            q = h @ layer["wq"]
            k = h @ layer["wk"]
            v = h @ layer["wv"]
            if hooks is not None and hooks.mode == "record":
                if not hooks.cache.has(hooks.step, layer_idx):
                    hooks.cache.put(hooks.step, layer_idx, k, v)
            elif hooks is not None and hooks.mode == "inject":
                k_src, v_src = hooks.cache.get(hooks.step, layer_idx)
                k, v = kv_mix(k_src, v_src, k, v, hooks.mix_ratios[layer_idx],
                              hooks.background_mask, hooks.global_mix)
            qh = self._split_heads(q)
            kh = self._split_heads(k)
            vh = self._split_heads(v)
            scores = scale * (qh @ kh.transpose(0, 1, 3, 2))
            scores -= scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            if (hooks is not None and hooks.mode == "record"
                    and hooks.attn_sink is not None):
                hooks.attn_sink.put(
                    hooks.step, layer_idx,
                    attn[:, :, :self.text_tokens, self.text_tokens:])
            if collect_attn:
                maps.append(attn)
            h = h + self._merge_heads(attn @ vh) @ layer["wo"]

        return h[:, self.text_tokens:, :] @ self.w_out, maps

    def evaluate(self, z: Latent, t: float, cond: Conditioning,
                 hooks: Optional[InjectionHooks] = None) -> Latent:
        vel, _ = self._forward(z, t, cond, hooks, collect_attn=False)
        return Latent(vel)

    def attention_maps(self, z: Latent, t: float, cond: Conditioning,
                       hooks: Optional[InjectionHooks] = None) -> np.ndarray:
        """Per-layer softmax maps for one evaluation (diagnostics only).

        Returns (layers, B, heads, L_total, L_total); rows sum to 1.
        """
        _, maps = self._forward(z, t, cond, hooks, collect_attn=True)
        return np.stack(maps, axis=0)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def extract_mask(attn_record: AttentionRecord, cond: Conditioning,
                 gamma: Optional[float] = None) -> EditMask:
    """Edit mask from recorded keyword-to-image attention.

    The attention the keyword text token pays to each image token is averaged
    over recorded steps, layers, heads and batch, min-max normalized to
    [0, 1], and thresholded at its mean. gamma sets the sigmoid sharpness of
    the soft mask; None requests the sharp limit (indicator with 0.5 at ties,
    matching the gamma -> infinity behavior).
    """
    if gamma is not None and not gamma > 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    blocks = attn_record.stacked()  # (entries, B, heads, L_txt, L_img)
    a = blocks[:, :, :, cond.keyword_index, :].mean(axis=(0, 1, 2))
    spread = a.max() - a.min()
    if spread > 1e-12:
        a = (a - a.min()) / spread
    else:
        a = np.full_like(a, 0.5)
    thresh = a.mean()
    if gamma is None:
        soft = np.where(a > thresh, 1.0, np.where(a < thresh, 0.0, 0.5))
    else:
        soft = _stable_sigmoid(gamma * (a - thresh))
    return EditMask(soft)
