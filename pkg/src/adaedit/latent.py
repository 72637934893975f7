"""Latent tensors, seeded random streams, and per-channel statistics.

A latent is an immutable float64 array of shape B x L x C (batch, tokens,
channels). All statistics here are population statistics (divide by N), the
convention used by instance-normalization style transfer; any standard
deviation used as a divisor receives the EPS_STD guard so constant channels
never divide by zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

EPS_STD = 1e-8

# Purpose-separated substreams derived from one user-facing seed. Each value
# selects an independent Philox stream so noise draws, model parameters and
# synthetic source fields never share a sample sequence.
STREAM_NOISE = 0
STREAM_MODEL = 1
STREAM_SOURCE = 2

_FLOAT_FMT = "{:.17g}"


class SeededRng:
    """Counter-based random stream (numpy Philox 4x64, ziggurat normals).

    The same (seed, stream) pair yields the same sample sequence on every
    platform running the same numpy release line; golden tests pin this
    repository's streams. A reimplementation in another language matches only
    if it adopts the same generator.

    Instances are stateful and single-owner: concurrent runs must each build
    their own (e.g. seed = base_seed + run_index), never share one.
    """

    def __init__(self, seed: int, stream: int = STREAM_NOISE):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return self._gen.integers(low, high, shape)


@dataclass(frozen=True, eq=False)
class Latent:
    """Immutable B x L x C tensor. Entries must be finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3:
            raise ValueError(f"latent must have shape (B, L, C), got {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"latent dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def b(self) -> int:
        return self.data.shape[0]

    @property
    def l(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and population standard deviation, both length C."""

    mean: np.ndarray
    std: np.ndarray


def sample_gaussian(rng: SeededRng, b: int, l: int, c: int) -> Latent:
    """Draw an i.i.d. standard-normal latent from the seeded stream."""
    for name, dim in (("b", b), ("l", l), ("c", c)):
        if int(dim) < 1:
            raise ValueError(f"dimension {name} must be positive, got {dim}")
    return Latent(rng.standard_normal((int(b), int(l), int(c))))


def resolve_tokens(tokens: Iterable[int], l: int) -> np.ndarray:
    """Validate a token index set against length l; returns sorted unique indices."""
    idx = np.unique(np.asarray(list(tokens), dtype=np.int64))
    if idx.size == 0:
        raise ValueError("empty token selection")
    if idx.min() < 0 or idx.max() >= l:
        bad = idx[(idx < 0) | (idx >= l)][0]
        raise IndexError(f"token index {bad} out of range [0, {l})")
    return idx


def select_tokens(z: Latent, tokens: Iterable[int]) -> np.ndarray:
    """C-contiguous copy of the selected tokens, shape (B, |S|, C).

    Contiguity pins numpy's reduction order, so statistics over the full token
    set match statistics over the unsliced array bitwise.
    """
    idx = resolve_tokens(tokens, z.l)
    return np.ascontiguousarray(z.data[:, idx, :])


def channel_stats(z: Latent, tokens: Optional[Iterable[int]] = None) -> ChannelStats:
    """Mean/std per channel over batch x selected tokens (all tokens if None)."""
    sel = z.data if tokens is None else select_tokens(z, tokens)
    return ChannelStats(mean=sel.mean(axis=(0, 1)), std=sel.std(axis=(0, 1)))


def channel_mean_over(z: Latent, tokens: Iterable[int]) -> np.ndarray:
    """Per-channel arithmetic mean over batch x token subset; length C."""
    return select_tokens(z, tokens).mean(axis=(0, 1))


def latent_to_csv(z: Latent, path) -> None:
    """Dump in row-major (b, l, c) order with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["b", "l", "c", "value"])
        for bi in range(z.b):
            for li in range(z.l):
                for ci in range(z.c):
                    writer.writerow([bi, li, ci, _FLOAT_FMT.format(z.data[bi, li, ci])])


def latent_from_csv(path) -> Latent:
    """Inverse of latent_to_csv; validates the index layout."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["b", "l", "c", "value"]:
            raise ValueError(f"unexpected latent CSV header: {header}")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
    if not rows:
        raise ValueError("latent CSV contains no data rows")
    b = max(r[0] for r in rows) + 1
    l = max(r[1] for r in rows) + 1
    c = max(r[2] for r in rows) + 1
    if len(rows) != b * l * c:
        raise ValueError(f"latent CSV has {len(rows)} rows, expected {b * l * c}")
    arr = np.empty((b, l, c), dtype=np.float64)
    for bi, li, ci, value in rows:
        arr[bi, li, ci] = value
    return Latent(arr)
