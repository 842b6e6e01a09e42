"""Ordered frame tuples and sinusoidal position encodings.

A tuple is a strictly increasing sequence of frame indices; the set of all
such tuples of one cardinality is what the per-cardinality transformers
attend over.  Retention < 1 keeps a random subset of the full set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import tensor as T
from .errors import ConfigError


@dataclass(frozen=True)
class TupleIndexSet:
    """All retained index tuples for one cardinality over F frames."""

    omega: int
    frames: int
    indices: np.ndarray  # (count, omega) intp, lexicographically sorted
    fraction: float = 1.0

    @property
    def count(self):
        return self.indices.shape[0]

    def __post_init__(self):
        self.indices.setflags(write=False)


def enumerate_tuples(frames, omega):
    """Every strictly increasing omega-tuple over range(frames), lexicographic."""
    if omega < 1:
        raise ValueError(f"tuple cardinality must be >= 1, got {omega}")
    if omega > frames:
        raise ValueError(f"tuple cardinality {omega} exceeds frame count {frames}")
    idx = np.array(list(combinations(range(frames), omega)), dtype=np.intp)
    return TupleIndexSet(omega=omega, frames=frames, indices=idx, fraction=1.0)


def subsample_tuples(tuple_set, fraction, seed):
    """Keep a uniform random subset of max(1, round(fraction * count)) tuples."""
    if not 0 < fraction <= 1:
        raise ValueError(f"retention fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return tuple_set
    n = tuple_set.count
    keep = max(1, int(math.floor(fraction * n + 0.5)))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    chosen = np.sort(rng.choice(n, size=keep, replace=False))
    return TupleIndexSet(
        omega=tuple_set.omega,
        frames=tuple_set.frames,
        indices=tuple_set.indices[chosen].copy(),
        fraction=fraction,
    )


class PositionalEncoder:
    """Deterministic sinusoidal code for a frame index, interleaved sin/cos."""

    def __init__(self, dim, base=10000.0):
        if dim <= 0 or dim % 2 != 0:
            raise ConfigError(f"positional encoding dimension must be even and positive, got {dim}")
        self.dim = dim
        self.base = float(base)

    def encode(self, index):
        if index < 0:
            raise ValueError(f"frame index must be nonnegative, got {index}")
        half = np.arange(self.dim // 2)
        freq = self.base ** (2 * half / self.dim)
        out = np.empty(self.dim)
        out[0::2] = np.sin(index / freq)
        out[1::2] = np.cos(index / freq)
        return out

    def table(self, frames):
        """(frames, dim) array of codes for indices 0..frames-1."""
        return np.stack([self.encode(i) for i in range(frames)])


@dataclass(frozen=True)
class TupleRepresentation:
    """One tuple's stacked frame rows: row i is frames[p_i] (+ PE(p_i))."""

    indices: tuple
    values: np.ndarray  # (omega, dim)


def build_tuple_representation(frames, p, encoder=None):
    """Rows frames[p_i] + PE(p_i); pass encoder=None to skip the encoding."""
    frames = np.asarray(frames)
    f = frames.shape[0]
    p = tuple(int(i) for i in p)
    if any(not 0 <= i < f for i in p):
        raise ValueError(f"tuple indices {p} out of range for {f} frames")
    rows = frames[list(p)].astype(float, copy=True)
    if encoder is not None:
        rows += np.stack([encoder.encode(i) for i in p])
    return TupleRepresentation(indices=p, values=rows)


def tuple_feature_matrix(emb, tuple_set, pe_table=None):
    """Gather a video's embedded frames into flattened tuple rows.

    emb is a tracked (F, D) tensor; the result is (count, omega*D) with each
    row the row-major concatenation of the tuple's frames, PE added first
    when a (F, D) pe_table is given.
    """
    flat_idx = tuple_set.indices.ravel()
    rows = T.take_rows(emb, flat_idx)
    if pe_table is not None:
        rows = T.add(rows, T.Tensor(pe_table[flat_idx]))
    d = emb.shape[1]
    return T.reshape(rows, (tuple_set.count, tuple_set.omega * d))
