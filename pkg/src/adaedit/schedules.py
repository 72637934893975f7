"""Injection weight schedules over the denoising trajectory.

Four families: a hard binary cutoff (the baseline used by prior flow editors)
and three progressive decays (sigmoid, cosine, linear) that take the per-step
injection weight smoothly from 1 to 0. Weights are evaluated at discrete step
indices t = i and precomputed at construction; evaluation is a table lookup.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

SCHEDULE_FAMILIES = ("sigmoid", "cosine", "linear", "binary")


def _stable_logistic(t: float) -> float:
    # 1 / (1 + exp(t)) without overflow for large |t|
    if t >= 0.0:
        e = math.exp(-t)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(t))


def _raw_weight(family: str, step: int, injection_steps: int,
                sharpness: float, midpoint: float) -> float:
    ratio = step / injection_steps
    if family == "sigmoid":
        return _stable_logistic(sharpness * (ratio - midpoint))
    if family == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * min(ratio, 1.0)))
    if family == "linear":
        return max(1.0 - ratio, 0.0)
    if family == "binary":
        return 1.0 if step < injection_steps else 0.0
    raise ValueError(f"unknown schedule family '{family}'")


@dataclass(frozen=True)
class InjectionSchedule:
    """Per-step injection weights w_0..w_{T-1}, all in [0, 1], non-increasing.

    sharpness and midpoint only affect the sigmoid family. activity_threshold
    is the soft cutoff: a progressive step counts as active while its weight
    exceeds it. The binary family ignores the threshold and is active exactly
    on steps < injection_steps, reproducing the baseline for ablations.
    """

    family: str
    total_steps: int
    injection_steps: int
    sharpness: float = 5.0
    midpoint: float = 0.7
    activity_threshold: float = 0.05
    weights: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.family not in SCHEDULE_FAMILIES:
            raise ValueError(
                f"schedule family must be one of {SCHEDULE_FAMILIES}, got '{self.family}'")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if not 1 <= self.injection_steps <= self.total_steps:
            raise ValueError(
                f"injection_steps must be in [1, total_steps], got {self.injection_steps}")
        if self.sharpness <= 0.0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")
        if not 0.0 < self.midpoint < 1.0:
            raise ValueError(f"midpoint must lie in (0, 1), got {self.midpoint}")
        if not 0.0 <= self.activity_threshold < 1.0:
            raise ValueError(
                f"activity_threshold must lie in [0, 1), got {self.activity_threshold}")
        w = tuple(
            _raw_weight(self.family, i, self.injection_steps, self.sharpness, self.midpoint)
            for i in range(self.total_steps))
        object.__setattr__(self, "weights", w)

    def _check_step(self, step: int) -> None:
        if not 0 <= step < self.total_steps:
            raise IndexError(f"step {step} out of range [0, {self.total_steps})")


def schedule_weight(s: InjectionSchedule, step: int) -> float:
    s._check_step(step)
    return s.weights[step]


def effective_ratio(s: InjectionSchedule, delta_base: float, step: int) -> float:
    """Effective KV mixing ratio at a step: delta_base * w(step)."""
    if not 0.0 <= delta_base <= 1.0:
        raise ValueError(f"delta_base must lie in [0, 1], got {delta_base}")
    s._check_step(step)
    return delta_base * s.weights[step]


def is_active(s: InjectionSchedule, step: int) -> bool:
    """Whether injection (and inversion-side caching) applies at this step."""
    s._check_step(step)
    if s.family == "binary":
        return step < s.injection_steps
    return s.weights[step] > s.activity_threshold


def active_steps(s: InjectionSchedule) -> tuple:
    return tuple(i for i in range(s.total_steps) if is_active(s, i))


def max_step_delta(s: InjectionSchedule, delta_base: float) -> float:
    """Largest jump of the effective ratio between consecutive steps.

    The effective ratio counts as 0 on inactive steps, so the deactivation
    drop is included. This is the scalar discontinuity a binary schedule
    maximizes (the full delta_base at its cutoff) and progressive schedules
    are designed to shrink.
    """
    if not 0.0 <= delta_base <= 1.0:
        raise ValueError(f"delta_base must lie in [0, 1], got {delta_base}")
    deltas = [
        delta_base * s.weights[i] if is_active(s, i) else 0.0
        for i in range(s.total_steps)
    ]
    if len(deltas) < 2:
        return 0.0
    return max(abs(b - a) for a, b in zip(deltas, deltas[1:]))


@dataclass(frozen=True)
class LayerRatioProfile:
    """Per-layer multiplier for the mixing ratio, affine in relative depth.

    w_layer(l) = 1 + slope * (l / (layer_count - 1) - 0.5); a single-layer
    model always gets 1. slope < 2 keeps every multiplier positive.
    """

    layer_count: int
    slope: float = 0.0

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError(f"layer_count must be positive, got {self.layer_count}")
        if not 0.0 <= self.slope < 2.0:
            raise ValueError(f"slope must lie in [0, 2), got {self.slope}")


def layer_multiplier(p: LayerRatioProfile, layer: int) -> float:
    if not 0 <= layer < p.layer_count:
        raise IndexError(f"layer {layer} out of range [0, {p.layer_count})")
    if p.layer_count == 1:
        return 1.0
    return 1.0 + p.slope * (layer / (p.layer_count - 1) - 0.5)


def layer_ratios(p: LayerRatioProfile, delta_eff: float) -> tuple:
    """Per-layer injection ratios: clamp(delta_eff * w_layer(l), 0, 1)."""
    return tuple(
        min(max(delta_eff * layer_multiplier(p, l), 0.0), 1.0)
        for l in range(p.layer_count))


def schedule_to_csv(s: InjectionSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "weight", "active"])
        for i in range(s.total_steps):
            writer.writerow([i, "{:.17g}".format(s.weights[i]), int(is_active(s, i))])
