"""Keyed counter-based random streams (Philox4x64-10).

A stream is addressed by ``(seed, replica, lane, step)``: the cipher key is
``(seed, replica)`` and the counter is ``(block, lane, step, 0)``. Lanes below
``2**63`` belong to particles (Brownian increments); tags at or above it
(partitions, initial draws, projection directions, assumption sampling)
never collide with particle lanes. Any stream can be regenerated in any
order from any thread, which is what makes runs independent of scheduling
and lets RBM and the full system share increments particle by particle.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import backend

TAG_BASE = 1 << 63
PARTITION = TAG_BASE
INIT = TAG_BASE + 1
DIRECTIONS = TAG_BASE + 2
SAMPLING = TAG_BASE + 3
#: step word reserved for draws made before the first time step
PRESTEP = (1 << 64) - 1
#: replica-id offset for the independent (uncoupled) noise mode
INDEPENDENT_OFFSET = 1 << 62

DEFAULT_SEED = 0
_U64 = (1 << 64) - 1


def _u64(value, what):
    value = int(value)
    if not 0 <= value <= _U64:
        raise ValueError(f"{what} must fit in an unsigned 64-bit integer, got {value}")
    return value


@dataclass(frozen=True)
class RngStream:
    """Value-like handle on one keyed stream.

    ``offset`` counts 4-word blocks already consumed; :meth:`advance`
    returns the continuation.
    """

    seed: int
    replica: int
    lane: int
    step: int
    offset: int = 0

    def __post_init__(self):
        for f in ("seed", "replica", "lane", "step", "offset"):
            object.__setattr__(self, f, _u64(getattr(self, f), f))

    @property
    def key(self):
        return (self.replica, self.lane, self.step)

    def _args(self):
        return self.seed, self.replica, self.lane, self.step, self.offset

    def raw(self, n):
        return backend.kernels().raw(*self._args(), int(n))

    def uniform(self, n):
        """``n`` doubles on [0, 1) with 53 random bits each."""
        return backend.kernels().uniform(*self._args(), int(n))

    def normal(self, n):
        """``n`` standard normals (Box-Muller, four per counter block)."""
        return backend.kernels().normal(*self._args(), int(n))

    def advance(self, n_values):
        """Stream positioned after ``n_values`` draws (rounded up to whole blocks)."""
        return replace(self, offset=self.offset + (int(n_values) + 3) // 4)


def particle_stream(seed, replica, particle, step):
    if not 0 <= particle < TAG_BASE:
        raise ValueError("particle lane must lie below the tag space")
    return RngStream(seed, replica, particle, step)


def partition_stream(seed, replica, step):
    """Stream reserved for the batch shuffle at ``step``."""
    return RngStream(seed, replica, PARTITION, step)


def gaussian_increment(stream, dim):
    """``dim`` i.i.d. N(0, 1) draws; identical for identical streams."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return stream.normal(dim)


def noise_block(seed, replica, step, n_particles, dim):
    """(N, d) standard normals; row ``i`` equals ``gaussian_increment`` of particle ``i``'s stream."""
    return backend.kernels().noise_block(_u64(seed, "seed"), _u64(replica, "replica"), _u64(step, "step"),
                                         int(n_particles), int(dim))


def initial_normals(seed, replica, n_particles, dim):
    return noise_block(seed, replica, PRESTEP, n_particles, dim)


def initial_uniforms(seed, replica, n_particles, dim):
    """Per-particle uniforms (row i from particle i's pre-step lane), independent of N."""
    out = np.empty((n_particles, dim))
    for i in range(n_particles):
        out[i] = RngStream(seed, replica, i, PRESTEP, offset=1 << 32).uniform(dim)
    return out
