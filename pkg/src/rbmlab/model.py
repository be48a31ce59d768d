"""Drift fields, interaction kernels and empirical assumption checks.

Fields are vectorized: ``drift(x)`` and ``kernel(z)`` take arrays of shape
``(..., d)`` and return the same shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ModelError
from .rng import RngStream

Field = Callable[[np.ndarray], np.ndarray]

# kernel codes understood by the compiled core
KERNEL_ZERO, KERNEL_LINEAR, KERNEL_BOUNDED = 0, 1, 2

BUILTIN_MODELS = ("linear_ou", "linear_interacting", "bounded_kernel")


@dataclass(frozen=True)
class ModelSpec:
    """Drift ``b``, kernel ``K``, diffusion ``sigma`` in dX = (b + K-average) dt + sqrt(2 sigma) dW.

    ``drift_rate`` and ``kernel_code``/``kappa`` are set for built-ins so the
    compiled core can evaluate them without Python callbacks; user models
    leave them ``None`` and go through the callables.
    """

    dim: int
    drift: Field
    kernel: Field
    sigma: float
    label: str = "custom"
    interacting: bool = True
    drift_rate: Optional[float] = None
    kernel_code: Optional[int] = None
    kappa: float = 0.0
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ModelError(f"dim must be a positive integer, got {self.dim}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ModelError(f"sigma must be finite and >= 0, got {self.sigma}")
        probe = np.zeros((1, self.dim))
        for name, fn in (("drift", self.drift), ("kernel", self.kernel)):
            out = np.asarray(fn(probe), dtype=float)
            if out.shape != probe.shape or not np.all(np.isfinite(out)):
                raise ModelError(f"{name} must map (n, {self.dim}) to finite (n, {self.dim}) arrays")

    @property
    def is_linear(self):
        return self.label in ("linear_ou", "linear_interacting")

    @property
    def linear_coefficients(self):
        """(a, kappa) with b(x) = -a x and K(z) = -kappa z; linear models only."""
        if not self.is_linear:
            raise ModelError(f"model {self.label!r} is not linear")
        return self.params["a"], self.params.get("kappa", 0.0)


def _zero(z):
    return np.zeros_like(z, dtype=float)


def _linear(rate):
    def f(x):
        return (-rate) * np.asarray(x, dtype=float)
    return f


def _bounded(kappa):
    def f(z):
        z = np.asarray(z, dtype=float)
        r2 = np.sum(z * z, axis=-1)
        return (kappa / (1.0 + r2))[..., None] * z
    return f


def _param(params, key, default=None, aliases=()):
    for k in (key, *aliases):
        if k in params:
            value = params[k]
            break
    else:
        if default is None:
            raise ModelError(f"missing parameter {key!r}")
        value = default
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ModelError(f"parameter {key!r} is not a number: {value!r}") from None
    if not math.isfinite(value):
        raise ModelError(f"parameter {key!r} must be finite, got {value}")
    return value


def builtin_model(name, params, allow_unconfined=False):
    """Build one of the analytic test models.

    ``linear_ou``: b = -a x, K = 0. ``linear_interacting``: b = -a x,
    K(z) = -kappa z. ``bounded_kernel``: b = -a x, K(z) = kappa z / (1 + |z|^2).
    Required keys: ``a`` (plus ``kappa`` for interacting models); ``sigma``
    defaults to 1 and ``dim`` to 1. ``a <= 0`` is rejected unless
    ``allow_unconfined`` (used to exercise the confinement checks).
    """
    if name not in BUILTIN_MODELS:
        raise ModelError(f"unknown model {name!r}; choose from {', '.join(BUILTIN_MODELS)}")
    a = _param(params, "a")
    sigma = _param(params, "sigma", 1.0)
    dim = _param(params, "dim", 1.0)
    if dim != int(dim) or dim < 1:
        raise ModelError(f"dim must be a positive integer, got {dim}")
    if a <= 0 and not allow_unconfined:
        raise ModelError(f"drift rate a must be > 0 for a confining drift, got {a}")
    stored = {"a": a, "sigma": sigma, "dim": int(dim)}
    if name == "linear_ou":
        kernel, code, kappa, interacting = _zero, KERNEL_ZERO, 0.0, False
    else:
        kappa = _param(params, "kappa", aliases=("κ", "k"))
        stored["kappa"] = kappa
        if name == "linear_interacting":
            kernel, code = _linear(kappa), KERNEL_LINEAR
        else:
            kernel, code = _bounded(kappa), KERNEL_BOUNDED
        interacting = kappa != 0.0
    return ModelSpec(dim=int(dim), drift=_linear(a), kernel=kernel, sigma=sigma, label=name,
                     interacting=interacting, drift_rate=a, kernel_code=code, kappa=kappa, params=stored)


@dataclass(frozen=True)
class AssumptionReport:
    lipschitz_b: float
    lipschitz_k: float
    confinement_alpha: float
    confinement_beta: float
    beta_exceeds_2L: bool
    kernel_deviation_bound: float
    sample_count: int
    kernel_unbounded: bool = False
    max_confinement_ratio: float = float("nan")

    @property
    def confining(self):
        return self.confinement_beta > 0

    @property
    def gating_failures(self):
        fails = []
        if not self.confining:
            fails.append(f"confinement: beta = {self.confinement_beta:.6g} <= 0")
        if not self.beta_exceeds_2L:
            fails.append(f"beta > 2L: beta = {self.confinement_beta:.6g}, 2L = {2 * self.lipschitz_k:.6g}")
        return fails

    def lines(self):
        def mark(ok):
            return "PASS" if ok else "FAIL"
        dev = f"{self.kernel_deviation_bound:.6g}"
        if self.kernel_unbounded:
            dev += " (grows with box: unbounded kernel, estimate over box only)"
        return [
            f"samples                 {self.sample_count}",
            f"lipschitz b (r)         {self.lipschitz_b:.6g}",
            f"lipschitz K (L)         {self.lipschitz_k:.6g}",
            f"confinement alpha       {self.confinement_alpha:.6g}",
            f"confinement beta        {self.confinement_beta:.6g}  [{mark(self.confining)}] beta > 0",
            f"beta > 2L               [{mark(self.beta_exceeds_2L)}]",
            f"sup |K^xi - F| estimate {dev}",
        ]


def _evaluate(fn, x, name):
    out = np.asarray(fn(x), dtype=float)
    if out.shape != x.shape:
        raise ModelError(f"{name} returned shape {out.shape}, expected {x.shape}")
    bad = ~np.all(np.isfinite(out), axis=-1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ModelError(f"{name} is not finite at x = {x[i].tolist()}")
    return out


def _sample_pairs(stream: RngStream, n, d, radius):
    """n pairs (x, y) uniform in the box, degenerate pairs redrawn from the continuation."""
    u = stream.uniform(2 * n * d)
    pairs = (2.0 * u - 1.0).reshape(n, 2, d) * radius
    nxt = stream.advance(2 * n * d)
    while True:
        same = np.all(pairs[:, 0] == pairs[:, 1], axis=-1)
        if not same.any():
            return pairs
        m = int(same.sum())
        redraw = (2.0 * nxt.uniform(2 * m * d) - 1.0).reshape(m, 2, d) * radius
        nxt = nxt.advance(2 * m * d)
        pairs[same] = redraw


def check_assumptions(model: ModelSpec, n_samples, box_radius, rng: RngStream):
    """Sampled estimates of the Lipschitz, confinement and boundedness constants.

    Confinement fit: beta is minus the largest ratio (x-y).(b(x)-b(y))/|x-y|^2
    over pairs with |x-y| >= box_radius/10; alpha is the smallest value >= 0
    making (x-y).(b(x)-b(y)) <= alpha - beta |x-y|^2 on every pair. The
    K^xi - F bound is 2 max |K(x-y)|, which is attained by configurations
    built from the sampled differences when K is odd.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if not box_radius > 0:
        raise ValueError("box_radius must be > 0")
    d = model.dim
    pairs = _sample_pairs(rng, int(n_samples), d, float(box_radius))
    x, y = pairs[:, 0], pairs[:, 1]
    dxy = x - y
    dist = np.linalg.norm(dxy, axis=-1)
    bx, by = _evaluate(model.drift, x, "drift"), _evaluate(model.drift, y, "drift")
    kx, ky = _evaluate(model.kernel, x, "kernel"), _evaluate(model.kernel, y, "kernel")
    lip_b = float(np.max(np.linalg.norm(bx - by, axis=-1) / dist))
    lip_k = float(np.max(np.linalg.norm(kx - ky, axis=-1) / dist))

    inner = np.sum(dxy * (bx - by), axis=-1)
    far = dist >= box_radius / 10.0
    ratios = inner[far] / dist[far] ** 2 if far.any() else inner / dist ** 2
    max_ratio = float(np.max(ratios))
    beta = -max_ratio
    alpha = max(0.0, float(np.max(inner + beta * dist ** 2)))

    k_diff = np.linalg.norm(_evaluate(model.kernel, dxy, "kernel"), axis=-1)
    k_wide = np.linalg.norm(_evaluate(model.kernel, 4.0 * dxy, "kernel"), axis=-1)
    sup_k = float(np.max(k_diff))
    unbounded = bool(np.max(k_wide) > 1.5 * sup_k) if sup_k > 0 else False
    return AssumptionReport(
        lipschitz_b=lip_b,
        lipschitz_k=lip_k,
        confinement_alpha=alpha,
        confinement_beta=beta,
        beta_exceeds_2L=bool(beta > 2.0 * lip_k),
        kernel_deviation_bound=2.0 * sup_k,
        sample_count=int(n_samples),
        kernel_unbounded=unbounded,
        max_confinement_ratio=max_ratio,
    )
