"""The edit pipeline: inversion with feature caching, channel-selective
perturbation, and sampling with progressive injection.

A "source image" at this scale is a latent directly: seeded smooth fields
stand in for encoded images. One run owns its model, cache and RNG streams
and is fully determined by the config seed.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diagnostics import psnr, ssim, velocity_jump_between
from .errors import ConfigError
from .latent import (STREAM_NOISE, STREAM_SOURCE, Latent, SeededRng,
                     sample_gaussian)
from .models import (AttentionRecord, Conditioning, EditMask, InjectionHooks,
                     KVCache, ToyAttentionFlow, extract_mask)
from .perturbation import (PERTURBATION_MODES, ChannelWeights,
                           PerturbationConfig, channel_gap,
                           latents_shift_channel_selective,
                           latents_shift_uniform)
from .schedules import (SCHEDULE_FAMILIES, InjectionSchedule,
                        LayerRatioProfile, effective_ratio, is_active,
                        layer_ratios, max_step_delta)
from .solvers import (SOLVER_KINDS, TimeGrid, integrate_backward,
                      integrate_forward, step_index_map)

logger = logging.getLogger("adaedit.pipeline")

RESULT_COLUMNS = (
    "run_id", "schedule", "T", "T_inj", "delta_base", "alpha", "tau", "solver",
    "psnr", "ssim", "max_step_delta", "velocity_jump", "evals",
)

MASK_KEYWORD_SOURCES = ("source", "target")


@dataclass
class EditConfig:
    """Every knob of one edit run; JSON documents mirror these field names."""

    total_steps: int = 15
    injection_steps: int = 4
    schedule: str = "sigmoid"
    delta_base: float = 0.9
    alpha: float = 0.25
    tau: float = 1.0
    solver: str = "reuse_velocity"
    perturbation_mode: str = "channel_selective"
    soft_mask_gamma: Optional[float] = None
    layer_ratio_beta: float = 0.0
    seed: int = 0
    # schedule shape
    sharpness: float = 5.0
    sigmoid_midpoint: float = 0.7
    activity_threshold: float = 0.05
    # toy model dimensions
    layer_count: int = 2
    embed_dim: int = 32
    img_tokens: int = 16
    text_tokens: int = 4
    channels: int = 8
    heads: int = 1
    vocab_size: int = 64
    batch: int = 1
    # conditioning; None picks deterministic defaults sized to text_tokens
    source_prompt_ids: Optional[Tuple[int, ...]] = None
    target_prompt_ids: Optional[Tuple[int, ...]] = None
    source_keyword_index: Optional[int] = None
    target_keyword_index: Optional[int] = None
    mask_keyword_source: str = "target"
    global_mix: bool = False

    def _default_keyword_position(self) -> int:
        return max(0, self.text_tokens - 2)

    def resolved_source_prompt(self) -> Tuple[int, ...]:
        if self.source_prompt_ids is not None:
            return tuple(int(t) for t in self.source_prompt_ids)
        return tuple(range(1, self.text_tokens + 1))

    def resolved_target_prompt(self) -> Tuple[int, ...]:
        if self.target_prompt_ids is not None:
            return tuple(int(t) for t in self.target_prompt_ids)
        ids = list(self.resolved_source_prompt())
        ids[self._default_keyword_position()] = self.text_tokens + 5
        return tuple(ids)

    def source_conditioning(self) -> Conditioning:
        kw = self.source_keyword_index
        if kw is None:
            kw = self._default_keyword_position()
        return Conditioning(self.resolved_source_prompt(), kw)

    def target_conditioning(self) -> Conditioning:
        kw = self.target_keyword_index
        if kw is None:
            kw = self._default_keyword_position()
        return Conditioning(self.resolved_target_prompt(), kw)

    def validate(self) -> "EditConfig":
        if self.total_steps < 1:
            raise ConfigError("total_steps", f"must be >= 1, got {self.total_steps}")
        if not 1 <= self.injection_steps <= self.total_steps:
            raise ConfigError(
                "injection_steps",
                f"must lie in [1, total_steps={self.total_steps}], "
                f"got {self.injection_steps}")
        if self.schedule not in SCHEDULE_FAMILIES:
            raise ConfigError(
                "schedule", f"must be one of {SCHEDULE_FAMILIES}, got '{self.schedule}'")
        if not 0.0 <= self.delta_base <= 1.0:
            raise ConfigError("delta_base", f"must lie in [0, 1], got {self.delta_base}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0.0:
            raise ConfigError("tau", f"must be positive, got {self.tau}")
        if self.solver not in SOLVER_KINDS:
            raise ConfigError(
                "solver", f"must be one of {SOLVER_KINDS}, got '{self.solver}'")
        if self.perturbation_mode not in PERTURBATION_MODES:
            raise ConfigError(
                "perturbation_mode",
                f"must be one of {PERTURBATION_MODES}, got '{self.perturbation_mode}'")
        if self.soft_mask_gamma is not None and not self.soft_mask_gamma > 0.0:
            raise ConfigError(
                "soft_mask_gamma", f"must be positive, got {self.soft_mask_gamma}")
        if not 0.0 <= self.layer_ratio_beta < 2.0:
            raise ConfigError(
                "layer_ratio_beta", f"must lie in [0, 2), got {self.layer_ratio_beta}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed}")
        if not self.sharpness > 0.0:
            raise ConfigError("sharpness", f"must be positive, got {self.sharpness}")
        if not 0.0 < self.sigmoid_midpoint < 1.0:
            raise ConfigError(
                "sigmoid_midpoint", f"must lie in (0, 1), got {self.sigmoid_midpoint}")
        if not 0.0 <= self.activity_threshold < 1.0:
            raise ConfigError(
                "activity_threshold",
                f"must lie in [0, 1), got {self.activity_threshold}")
        for name in ("layer_count", "embed_dim", "img_tokens", "text_tokens",
                     "channels", "heads", "vocab_size", "batch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                "heads", f"embed_dim {self.embed_dim} not divisible by {self.heads}")
        g = math.isqrt(self.img_tokens)
        if g * g != self.img_tokens:
            raise ConfigError(
                "img_tokens", f"must be a perfect square, got {self.img_tokens}")
        if self.mask_keyword_source not in MASK_KEYWORD_SOURCES:
            raise ConfigError(
                "mask_keyword_source",
                f"must be one of {MASK_KEYWORD_SOURCES}, got '{self.mask_keyword_source}'")
        for prompt_field, prompt in (("source_prompt_ids", self.resolved_source_prompt()),
                                     ("target_prompt_ids", self.resolved_target_prompt())):
            if len(prompt) != self.text_tokens:
                raise ConfigError(
                    prompt_field,
                    f"length {len(prompt)} != text_tokens {self.text_tokens}")
            if any(t < 0 or t >= self.vocab_size for t in prompt):
                raise ConfigError(
                    prompt_field, f"token ids must lie in [0, {self.vocab_size})")
        for kw_field, kw in (("source_keyword_index", self.source_keyword_index),
                             ("target_keyword_index", self.target_keyword_index)):
            if kw is not None and not 0 <= kw < self.text_tokens:
                raise ConfigError(
                    kw_field, f"must lie in [0, text_tokens={self.text_tokens}), got {kw}")
        return self

    def resolved_dict(self) -> dict:
        """JSON-serializable dict with prompt defaults materialized."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        out["source_prompt_ids"] = list(self.resolved_source_prompt())
        out["target_prompt_ids"] = list(self.resolved_target_prompt())
        out["source_keyword_index"] = self.source_conditioning().keyword_index
        out["target_keyword_index"] = self.target_conditioning().keyword_index
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EditConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        kwargs = dict(data)
        for key in ("source_prompt_ids", "target_prompt_ids"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(int(t) for t in kwargs[key])
        return cls(**kwargs)


def config_hash(cfg: EditConfig) -> str:
    canonical = json.dumps(cfg.resolved_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class EditResult:
    """Everything one edit run produced, for reporting and assertions."""

    edited: Latent
    reconstructed_source: Optional[Latent]
    mask: EditMask
    channel_weights: ChannelWeights
    schedule_trace: Tuple[Tuple[float, float, bool], ...]
    diagnostics: Dict[str, float]
    channel_gaps: np.ndarray


def build_model(cfg: EditConfig) -> ToyAttentionFlow:
    return ToyAttentionFlow(
        seed=cfg.seed, layer_count=cfg.layer_count, embed_dim=cfg.embed_dim,
        img_tokens=cfg.img_tokens, text_tokens=cfg.text_tokens,
        channels=cfg.channels, heads=cfg.heads, vocab_size=cfg.vocab_size)


def build_schedule(cfg: EditConfig) -> InjectionSchedule:
    return InjectionSchedule(
        family=cfg.schedule, total_steps=cfg.total_steps,
        injection_steps=cfg.injection_steps, sharpness=cfg.sharpness,
        midpoint=cfg.sigmoid_midpoint,
        activity_threshold=cfg.activity_threshold)


def generate_source_latent(cfg: EditConfig) -> Latent:
    """Seeded smooth per-channel fields on the token grid, standing in for an
    encoded image."""
    rng = SeededRng(cfg.seed, stream=STREAM_SOURCE)
    g = math.isqrt(cfg.img_tokens)
    ys, xs = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    arr = np.empty((cfg.batch, cfg.img_tokens, cfg.channels))
    for bi in range(cfg.batch):
        for ci in range(cfg.channels):
            plane = 0.3 * rng.standard_normal(())
            for k in range(1, 4):
                amp = rng.standard_normal(()) * 0.8 / k
                fx, fy = rng.integers(1, 4, (2,))
                phase = rng.uniform(0.0, 2.0 * math.pi, ())
                plane = plane + amp * np.sin(
                    2.0 * math.pi * (fx * xs + fy * ys) / g + phase)
            arr[bi, :, ci] = plane.reshape(-1)
    return Latent(arr)


def resolve_edit_tokens(mask: EditMask, token_count: int) -> Tuple[Tuple[int, ...], bool]:
    """The hard edit set, substituting all tokens (with a warning) when empty.

    Mask extraction can degenerate on toy prompts; editing must not silently
    become a no-op, so an empty set falls back to every token.
    """
    if mask.hard:
        return mask.hard, False
    logger.warning(
        "edit mask selected no tokens; falling back to all %d tokens", token_count)
    return tuple(range(token_count)), True


def _check_source(source: Latent, cfg: EditConfig) -> None:
    expected = (cfg.batch, cfg.img_tokens, cfg.channels)
    if source.shape != expected:
        raise ValueError(f"source latent shape {source.shape} != config {expected}")


def run_edit(source: Latent, c_src: Conditioning, c_tgt: Conditioning,
             cfg: EditConfig) -> EditResult:
    """Invert the source, perturb the inverted latent, resample under the
    target prompt with progressive feature injection."""
    cfg.validate()
    _check_source(source, cfg)

    model = build_model(cfg)
    schedule = build_schedule(cfg)
    grid = TimeGrid.uniform(cfg.total_steps)
    z_rand = sample_gaussian(
        SeededRng(cfg.seed, stream=STREAM_NOISE), cfg.batch, cfg.img_tokens, cfg.channels)
    cache = KVCache()
    attn = AttentionRecord()

    # Phase 1: inversion under the source prompt, caching K/V and attention
    # on schedule-active steps only.
    def invert_hooks(i):
        if is_active(schedule, i):
            return InjectionHooks(mode="record", cache=cache,
                                  step=step_index_map(grid, i), attn_sink=attn)
        return None

    inversion = integrate_backward(model, source, grid, cfg.solver, c_src,
                                   invert_hooks, phase="inversion")
    z_inv = inversion.final

    mask_cond = c_tgt if cfg.mask_keyword_source == "target" else c_src
    mask = extract_mask(attn, mask_cond, cfg.soft_mask_gamma)
    edit_tokens, fallback = resolve_edit_tokens(mask, cfg.img_tokens)

    # Phase 2: perturb the inverted latent toward noise on the edit tokens.
    gaps = channel_gap(z_inv, z_rand, edit_tokens)
    if cfg.perturbation_mode == "channel_selective":
        pcfg = PerturbationConfig(cfg.alpha, cfg.tau, cfg.perturbation_mode)
        z_hat, weights = latents_shift_channel_selective(z_inv, z_rand, pcfg, edit_tokens)
    else:
        z_hat = latents_shift_uniform(z_inv, z_rand, cfg.alpha, edit_tokens)
        weights = ChannelWeights.uniform(cfg.channels, cfg.tau)

    # Phase 3: sample under the target prompt, injecting cached features at
    # the schedule's effective ratio wherever it is active.
    profile = LayerRatioProfile(cfg.layer_count, cfg.layer_ratio_beta)

    def ratios_for(i: int):
        if i >= cfg.total_steps or not is_active(schedule, i):
            return None
        return layer_ratios(profile, effective_ratio(schedule, cfg.delta_base, i))

    def sample_hooks(i):
        r = ratios_for(i)
        if r is None:
            return None
        return InjectionHooks(mode="inject", cache=cache, step=i, mix_ratios=r,
                              background_mask=mask, global_mix=cfg.global_mix)

    sampling = integrate_forward(model, z_hat, grid, cfg.solver, c_tgt,
                                 sample_hooks, phase="sampling")
    edited = sampling.final

    reconstruction = integrate_forward(model, z_inv, grid, cfg.solver, c_src,
                                       None, phase="reconstruction")
    recon = reconstruction.final

    trace = tuple(
        (schedule.weights[i], effective_ratio(schedule, cfg.delta_base, i),
         is_active(schedule, i))
        for i in range(cfg.total_steps))

    # Largest injected-velocity change between consecutive schedule positions,
    # measured along the sampling trajectory (the binary cutoff jump for the
    # binary family).
    max_jump = 0.0
    for i in range(cfg.total_steps):
        ra = ratios_for(i)
        if ra is None:
            continue
        rb = ratios_for(i + 1)
        jump = velocity_jump_between(
            model, sampling.states[i], grid.times[i], c_tgt, cache, i, ra, rb,
            mask=mask, global_mix=cfg.global_mix)
        max_jump = max(max_jump, jump)

    # reference peak falls back to 1 for degenerate constant reconstructions
    peak = float(np.ptp(recon.data)) or 1.0
    diagnostics = {
        "max_step_delta": max_step_delta(schedule, cfg.delta_base),
        "velocity_jump": max_jump,
        "eval_count_inversion": float(inversion.velocity_evals),
        "eval_count_sampling": float(sampling.velocity_evals),
        "eval_count_reconstruction": float(reconstruction.velocity_evals),
        "evals": float(inversion.velocity_evals + sampling.velocity_evals),
        "psnr": psnr(recon, edited, peak=peak),
        "ssim": ssim(recon, edited, peak=peak),
        "empty_mask_fallback": 1.0 if fallback else 0.0,
    }

    return EditResult(
        edited=edited, reconstructed_source=recon, mask=mask,
        channel_weights=weights, schedule_trace=trace, diagnostics=diagnostics,
        channel_gaps=gaps)


def run_reconstruction(source: Latent, c_src: Conditioning,
                       cfg: EditConfig) -> Latent:
    """Inversion followed by plain re-sampling under the source prompt: no
    perturbation, no injection. The inversion-quality baseline."""
    cfg.validate()
    _check_source(source, cfg)
    model = build_model(cfg)
    grid = TimeGrid.uniform(cfg.total_steps)
    inversion = integrate_backward(model, source, grid, cfg.solver, c_src,
                                   None, phase="inversion")
    sampling = integrate_forward(model, inversion.final, grid, cfg.solver,
                                 c_src, None, phase="reconstruction")
    return sampling.final


def summarize_result(run_id: str, cfg: EditConfig, result: EditResult) -> dict:
    """One result row in the pipeline CSV schema."""
    d = result.diagnostics
    return {
        "run_id": run_id,
        "schedule": cfg.schedule,
        "T": cfg.total_steps,
        "T_inj": cfg.injection_steps,
        "delta_base": cfg.delta_base,
        "alpha": cfg.alpha,
        "tau": cfg.tau,
        "solver": cfg.solver,
        "psnr": d["psnr"],
        "ssim": d["ssim"],
        "max_step_delta": d["max_step_delta"],
        "velocity_jump": d["velocity_jump"],
        "evals": int(d["evals"]),
    }


def run_ablation_grid(source: Latent, prompts: Tuple[Conditioning, Conditioning],
                      base_cfg: EditConfig,
                      axes: Dict[str, Sequence]) -> List[dict]:
    """Cartesian product of axis values, one edit run per combination.

    Rows keep the base config's seed so an axis's effect is not confounded by
    different noise draws; ordering follows the axes dict and is
    deterministic. Unknown axis names raise a config error.
    """
    known = {f.name for f in fields(EditConfig)}
    for name in axes:
        if name not in known:
            raise ConfigError(name, "unknown config field")
    # config fields already visible through a schema column
    in_schema = {"schedule", "total_steps", "injection_steps", "delta_base",
                 "alpha", "tau", "solver"}
    c_src, c_tgt = prompts
    names = list(axes)
    rows = []
    for index, combo in enumerate(itertools.product(*(list(axes[n]) for n in names))):
        overrides = dict(zip(names, combo))
        cfg = replace(base_cfg, **overrides).validate()
        result = run_edit(source, c_src, c_tgt, cfg)
        row = summarize_result(f"{index:03d}", cfg, result)
        for name in names:
            if name not in in_schema:
                row[name] = overrides[name]
        rows.append(row)
    return rows
