"""ODE integration of the flow field, forward (sampling) and backward (inversion).

Three schemes:
  euler          one evaluation per step, first order
  midpoint       classic second-order midpoint, two evaluations per step
  reuse_velocity midpoint variant that carries each step's midpoint velocity
                 into the next step's first stage, so only the first step
                 costs two evaluations (T+1 total)

Backward integration runs the same schemes with a negated step over the
mirrored interval sequence, so inversion position i covers the same grid
interval [t_i, t_{i+1}] as sampling step i.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .errors import DivergenceError
from .latent import Latent

SOLVER_KINDS = ("euler", "midpoint", "reuse_velocity")

DIVERGENCE_LIMIT = 1e6

HooksFn = Optional[Callable[[int], object]]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times t_0 = 0 < ... < t_T = 1."""

    times: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.times, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError(f"grid needs at least two times, got shape {arr.shape}")
        if arr[0] != 0.0 or arr[-1] != 1.0:
            raise ValueError(f"grid must span exactly [0, 1], got [{arr[0]}, {arr[-1]}]")
        if np.any(np.diff(arr) <= 0.0):
            raise ValueError("grid times must be strictly increasing")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "times", arr)

    @classmethod
    def uniform(cls, steps: int) -> "TimeGrid":
        if steps < 1:
            raise ValueError(f"steps must be positive, got {steps}")
        return cls(np.linspace(0.0, 1.0, steps + 1))

    @property
    def steps(self) -> int:
        return self.times.size - 1


@dataclass
class Trajectory:
    """States in traversal order plus the model-evaluation ledger."""

    states: List[Latent]
    times: np.ndarray
    velocity_evals: int
    eval_counts: tuple

    @property
    def final(self) -> Latent:
        return self.states[-1]


def step_index_map(grid: TimeGrid, inversion_step: int) -> int:
    """Sampling-step index mirroring an inversion loop position.

    Both traversals index intervals by their left endpoint, so the map is the
    identity; it exists to pin the cache-key convention in one place.
    """
    if not 0 <= inversion_step < grid.steps:
        raise IndexError(
            f"inversion step {inversion_step} out of range [0, {grid.steps})")
    return inversion_step


def _guard(arr: np.ndarray, step: int, phase: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(step, "non-finite state", phase)
    if np.max(np.abs(arr)) > DIVERGENCE_LIMIT:
        raise DivergenceError(step, f"state norm exceeds {DIVERGENCE_LIMIT:g}", phase)


def _integrate(field, z_start: Latent, grid: TimeGrid, kind: str, cond,
               hooks_fn: HooksFn, forward: bool, phase: str) -> Trajectory:
    if kind not in SOLVER_KINDS:
        raise ValueError(f"solver kind must be one of {SOLVER_KINDS}, got '{kind}'")
    times = grid.times
    t_count = grid.steps
    order = range(t_count) if forward else range(t_count - 1, -1, -1)
    sign = 1.0 if forward else -1.0

    evals = 0

    def ev(state: np.ndarray, t: float, hooks) -> np.ndarray:
        nonlocal evals
        evals += 1
        return field.evaluate(Latent(state), float(t), cond, hooks).data

    z = z_start.data
    states = [z_start]
    counts = [0]
    traversal_times = [times[0] if forward else times[-1]]
    carried = None
    for i in order:
        h = times[i + 1] - times[i]
        t_from = times[i] if forward else times[i + 1]
        t_mid = times[i] + 0.5 * h
        hooks = hooks_fn(i) if hooks_fn is not None else None
        _guard(z, i, phase)
        if kind == "euler":
            v = ev(z, t_from, hooks)
            z = z + sign * h * v
        elif kind == "midpoint":
            v1 = ev(z, t_from, hooks)
            zm = z + sign * 0.5 * h * v1
            _guard(zm, i, phase)
            vm = ev(zm, t_mid, hooks)
            z = z + sign * h * vm
        else:  # reuse_velocity
            v1 = carried if carried is not None else ev(z, t_from, hooks)
            zm = z + sign * 0.5 * h * v1
            _guard(zm, i, phase)
            vm = ev(zm, t_mid, hooks)
            z = z + sign * h * vm
            carried = vm
        _guard(z, i, phase)
        states.append(Latent(z))
        counts.append(evals)
        traversal_times.append(times[i + 1] if forward else times[i])

    return Trajectory(states=states, times=np.asarray(traversal_times),
                      velocity_evals=evals, eval_counts=tuple(counts))


def integrate_forward(field, z0: Latent, grid: TimeGrid, kind: str = "euler",
                      cond=None, hooks_fn: HooksFn = None,
                      phase: str = "forward") -> Trajectory:
    """Integrate dz/dt = v from t = 0 to t = 1 starting at z0."""
    return _integrate(field, z0, grid, kind, cond, hooks_fn, forward=True, phase=phase)


def integrate_backward(field, z1: Latent, grid: TimeGrid, kind: str = "euler",
                       cond=None, hooks_fn: HooksFn = None,
                       phase: str = "backward") -> Trajectory:
    """Integrate the reverse ODE from t = 1 down to t = 0 starting at z1."""
    return _integrate(field, z1, grid, kind, cond, hooks_fn, forward=False, phase=phase)


def trajectory_to_csv(tr: Trajectory, path, dump_states: bool = False) -> None:
    """Per-step summary CSV; dump_states additionally writes one full latent
    CSV per step next to it (large)."""
    from .latent import latent_to_csv

    path = str(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t", "norm", "eval_count"])
        for i, state in enumerate(tr.states):
            norm = float(np.linalg.norm(state.data))
            writer.writerow([
                i, "{:.17g}".format(tr.times[i]), "{:.17g}".format(norm),
                tr.eval_counts[i],
            ])
    if dump_states:
        stem = path[:-4] if path.endswith(".csv") else path
        for i, state in enumerate(tr.states):
            latent_to_csv(state, f"{stem}_state_{i:03d}.csv")
