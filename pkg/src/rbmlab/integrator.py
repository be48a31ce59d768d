"""Full-system Euler-Maruyama, the random batch method and trajectory runners.

Both integrators share one update path: the full system is the random batch
step with a single batch holding every particle. Batch members are always
visited in ascending index order, so ``p = N`` reproduces the full system
bit for bit under a shared seed.
"""
from __future__ import annotations

import csv
import math
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _pykernels, backend, rng
from .errors import ConfigError, NumericalAbort
from .metrics import MetricsRecord
from .model import ModelSpec

INTEGRATORS = ("full_em", "rbm")
COUPLINGS = ("coupled", "independent")


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    time: float = 0.0
    step: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValueError(f"positions must be (N, d), got shape {x.shape}")
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise NumericalAbort(f"non-finite position for particle {int(np.flatnonzero(bad)[0])}",
                                 particle=int(np.flatnonzero(bad)[0]), step=self.step)
        object.__setattr__(self, "positions", x)

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]


@dataclass(frozen=True)
class BatchPartition:
    """``assignment[i]`` is the batch of particle i; ``members`` lists each batch in ascending order."""

    assignment: np.ndarray
    p: int
    n: int
    members: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if self.n * self.p != a.size:
            raise ValueError(f"n*p = {self.n}*{self.p} does not match N = {a.size}")
        if self.members is None:
            counts = np.bincount(a, minlength=self.n)
            if a.min(initial=0) < 0 or counts.size != self.n or np.any(counts != self.p):
                raise ValueError("every batch index must appear exactly p times")
            members = np.argsort(a, kind="stable").reshape(self.n, self.p)
            object.__setattr__(self, "members", np.ascontiguousarray(members))
        object.__setattr__(self, "assignment", a)

    @classmethod
    def single(cls, n_particles):
        """The one-batch partition (every particle interacts with every other)."""
        return cls(np.zeros(n_particles, dtype=np.int64), n_particles, 1,
                   np.arange(n_particles, dtype=np.int64)[None, :])

    def batches(self):
        return [tuple(row) for row in self.members.tolist()]


@dataclass(frozen=True)
class InitialLaw:
    """Initial distribution rho_0: ``gaussian`` (mean, var), ``uniform`` (low, high) or ``point``."""

    kind: str = "point"
    mean: float | tuple = 0.0
    var: float | tuple = 1.0
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "point"):
            raise ConfigError(f"unknown initial law {self.kind!r}; choose gaussian, uniform or point")
        if self.kind == "uniform" and not self.low < self.high:
            raise ConfigError("uniform initial law needs low < high")
        if self.kind == "gaussian" and np.any(np.linalg.eigvalsh(self.covariance(1)) < 0):
            raise ConfigError("initial variance must be >= 0")

    def mean_vector(self, dim):
        return np.broadcast_to(np.asarray(self.mean, dtype=float), (dim,)).copy()

    def covariance(self, dim):
        if self.kind == "point":
            return np.zeros((dim, dim))
        if self.kind == "uniform":
            return np.eye(dim) * (self.high - self.low) ** 2 / 12.0
        v = np.asarray(self.var, dtype=float)
        if v.ndim == 2:
            return v.copy()
        return np.diag(np.broadcast_to(v, (dim,)).astype(float))

    def sample(self, seed, replica, n_particles, dim):
        if self.kind == "point":
            return np.tile(self.mean_vector(dim), (n_particles, 1))
        if self.kind == "uniform":
            u = rng.initial_uniforms(seed, replica, n_particles, dim)
            return self.low + (self.high - self.low) * u
        z = rng.initial_normals(seed, replica, n_particles, dim)
        cov = self.covariance(dim)
        w, v = np.linalg.eigh(cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return self.mean_vector(dim) + z @ root.T


@dataclass(frozen=True)
class SimConfig:
    N: int
    tau: float
    T: float
    model: ModelSpec
    p: int = 2
    integrator: str = "rbm"
    replicas: int = 1
    seed: int = rng.DEFAULT_SEED
    init: InitialLaw = InitialLaw()
    coupling: str = "coupled"

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"integrator must be one of {INTEGRATORS}, got {self.integrator!r}")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N}")
        if self.model.interacting and self.N < 2:
            raise ConfigError("an interacting model needs N >= 2")
        if self.integrator == "rbm":
            if self.p < 2:
                raise ConfigError(f"batch size p must be >= 2, got p={self.p}")
            if self.N % self.p:
                raise ConfigError(f"batch size p={self.p} must divide N={self.N} (N mod p = {self.N % self.p})")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ConfigError(f"time step tau must be > 0, got {self.tau}")
        if not (self.T >= 0 and math.isfinite(self.T)):
            raise ConfigError(f"horizon T must be >= 0, got {self.T}")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if not 0 <= int(self.seed) < 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def n_steps(self):
        # floor(T / tau), tolerant to representation error (2 / 0.1 -> 20)
        return int(math.floor(self.T / self.tau + 1e-9))

    @property
    def noise_scale(self):
        return math.sqrt(2.0 * self.model.sigma * self.tau)

    def with_(self, **changes):
        return replace(self, **changes)


def sample_partition(N, p, stream):
    """Uniform random division into N/p unordered batches (Fisher-Yates, then consecutive chunks)."""
    if p < 2 or N % p:
        raise ConfigError(f"batch size p={p} must be >= 2 and divide N={N}")
    assignment, members = backend.kernels().shuffle_partition(
        stream.seed, stream.replica, stream.lane, stream.step, int(N), int(p))
    return BatchPartition(assignment, int(p), int(N) // int(p), members)


def batch_force(positions, i, partition, kernel):
    """(1/(p-1)) sum over batch-mates j != i of K(x_i - x_j)."""
    x = np.asarray(positions, dtype=float).reshape(len(positions), -1)
    row = partition.members[partition.assignment[i]]
    mates = row[row != i]
    return np.asarray(kernel(x[i] - x[mates]), dtype=float).sum(axis=0) / (partition.p - 1)


def full_force(positions, i, kernel):
    """(1/(N-1)) sum over j != i of K(x_i - x_j)."""
    x = np.asarray(positions, dtype=float).reshape(len(positions), -1)
    if x.shape[0] < 2:
        raise ValueError("full force needs N >= 2")
    others = np.delete(np.arange(x.shape[0]), i)
    return np.asarray(kernel(x[i] - x[others]), dtype=float).sum(axis=0) / (x.shape[0] - 1)


def interaction_forces(positions, members, model):
    """Batch-averaged interaction for every particle; ``members`` of shape (n, p)."""
    x = positions
    p = members.shape[1]
    if not model.interacting or p < 2:
        return np.zeros_like(x)
    if model.kernel_code is not None:
        return backend.kernels().batch_forces(x, members, model.kernel_code, model.kappa)
    return _pykernels.batch_forces_generic(x, members, model.kernel)


def _advance(ens, members, cfg, noise):
    model = cfg.model
    x = ens.positions
    noise = np.ascontiguousarray(noise, dtype=np.float64).reshape(x.shape)
    forces = interaction_forces(x, members, model)
    kern = backend.kernels()
    if model.drift_rate is not None:
        out, bad = kern.linear_drift_update(x, model.drift_rate, forces, noise, cfg.tau, cfg.noise_scale)
    else:
        drift = np.ascontiguousarray(model.drift(x), dtype=np.float64)
        out, bad = kern.em_update(x, drift, forces, noise, cfg.tau, cfg.noise_scale)
    step = ens.step + 1
    if bad >= 0:
        raise NumericalAbort(
            f"particle {bad} left the finite range (|x| > 1e10 or non-finite) at step {step}",
            particle=bad, step=step)
    return ParticleEnsemble(out, step * cfg.tau, step)


def full_em_step(ens, cfg, noise):
    """x_i + tau b(x_i) + tau F(x_i) + sqrt(2 sigma tau) z_i, forces at the pre-step state."""
    return _advance(ens, _single_members(ens.n), cfg, noise)


def rbm_step(ens, partition, cfg, noise):
    """As :func:`full_em_step` with F replaced by the batch average K^xi."""
    if partition.members.size != ens.n:
        raise ValueError(f"partition covers {partition.members.size} particles, ensemble has {ens.n}")
    return _advance(ens, partition.members, cfg, noise)


_SINGLE = {}


def _single_members(n):
    m = _SINGLE.get(n)
    if m is None:
        m = _SINGLE.setdefault(n, np.arange(n, dtype=np.int64)[None, :])
    return m


def interpolate(ens_at_Tk, partition, cfg, t, noise, step_noise=None):
    """State at T_k <= t < T_{k+1} with drift and batch forces frozen at T_k.

    ``noise`` holds standard normals for W_t - W_{T_k}. When ``step_noise``
    (the normals that drive the full step) is given, the increment is drawn
    from the Brownian bridge pinned to that step, so t -> T_{k+1} recovers
    :func:`rbm_step` exactly.
    """
    tk = ens_at_Tk.step * cfg.tau
    s = t - tk
    if not 0.0 <= s < cfg.tau:
        raise ValueError(f"t={t} outside [T_k, T_k+1) = [{tk}, {tk + cfg.tau})")
    x = ens_at_Tk.positions
    model = cfg.model
    drift = np.asarray(model.drift(x), dtype=float)
    forces = interaction_forces(x, partition.members, model)
    z = np.asarray(noise, dtype=float).reshape(x.shape)
    if step_noise is None:
        dw = math.sqrt(s) * z
    else:
        zs = np.asarray(step_noise, dtype=float).reshape(x.shape)
        dw = (s / cfg.tau) * math.sqrt(cfg.tau) * zs + math.sqrt(s * (cfg.tau - s) / cfg.tau) * z
    out = x + s * drift + s * forces + math.sqrt(2.0 * model.sigma) * dw
    return ParticleEnsemble(out, t, ens_at_Tk.step)


def initial_ensemble(cfg, replica=0):
    x = cfg.init.sample(cfg.seed, replica, cfg.N, cfg.model.dim)
    return ParticleEnsemble(x, 0.0, 0)


def noise_replica(cfg, replica):
    """Replica key for the Brownian increments; coupled runs share it across integrators."""
    if cfg.coupling == "independent" and cfg.integrator == "full_em":
        return replica + rng.INDEPENDENT_OFFSET
    return replica


def run(cfg, observers=(), replica=0, stride=1, initial=None, timings=None):
    """Advance floor(T/tau) steps; returns (final ensemble, MetricsRecord).

    Observers are called as ``obs(ens, record, replica)`` at step 0, every
    ``stride`` steps and at the final step. RBM draws a fresh partition
    each step. ``timings``, if a list, receives per-step wall-clock seconds.
    On divergence the raised :class:`NumericalAbort` carries the partial record.
    """
    ens = initial if initial is not None else initial_ensemble(cfg, replica)
    record = MetricsRecord(metadata={"seed": cfg.seed, "replica": replica, "integrator": cfg.integrator,
                                     "backend": backend.name()})
    n_steps = cfg.n_steps
    stride = max(int(stride), 1)

    def notify(e):
        for obs in observers:
            obs(e, record, replica)

    notify(ens)
    kern = backend.kernels()
    seed, nkey, N, d = cfg.seed, noise_replica(cfg, replica), cfg.N, cfg.model.dim
    is_rbm = cfg.integrator == "rbm"
    members = _single_members(N)
    clock = _time.perf_counter
    try:
        for k in range(n_steps):
            t0 = clock() if timings is not None else 0.0
            noise = kern.noise_block(seed, nkey, k, N, d)
            if is_rbm:
                members = kern.shuffle_partition(seed, replica, rng.PARTITION, k, N, cfg.p)[1]
            ens = _advance(ens, members, cfg, noise)
            if timings is not None:
                timings.append(clock() - t0)
            if ens.step % stride == 0 or ens.step == n_steps:
                notify(ens)
    except NumericalAbort as exc:
        exc.record = record
        raise
    return ens, record


def trajectory_writer(path, stride=1):
    """Observer appending snapshots as CSV rows (replica, step, time, particle, x_0..x_{d-1}).

    Returns ``(observer, close)``.
    """
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    header = [False]

    def observe(ens, record, replica):
        if not header[0]:
            w.writerow(["replica", "step", "time", "particle"] + [f"x_{k}" for k in range(ens.dim)])
            header[0] = True
        if ens.step % stride:
            return
        for i, row in enumerate(ens.positions.tolist()):
            w.writerow([replica, ens.step, repr(ens.time), i] + [repr(v) for v in row])

    return observe, fh.close
