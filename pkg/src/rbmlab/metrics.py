"""Diagnostics: Wasserstein-1 distances, moments, Gaussian-fit KL, log-log rate fits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .rng import DIRECTIONS, RngStream


@dataclass
class MetricsRecord:
    """Time-indexed series of (time, metric, value, replica) rows."""

    entries: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._last = {}

    def add(self, time, metric, value, replica=0):
        key = (metric, replica)
        if key in self._last and time < self._last[key]:
            raise ValueError(f"time {time} precedes {self._last[key]} for {metric!r}, replica {replica}")
        self._last[key] = time
        self.entries.append((float(time), str(metric), float(value), int(replica)))

    def extend(self, other):
        for row in other.entries:
            self.add(*row)

    def series(self, metric, replica=0):
        rows = [(t, v) for t, m, v, r in self.entries if m == metric and r == replica]
        return np.array(rows).reshape(-1, 2)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "metric", "value", "replica"])
            for t, m, v, r in self.entries:
                w.writerow([repr(t), m, repr(v), r])


def w1_empirical_1d(a, b):
    """Exact W1 between two equal-size empirical measures (sorted matching)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size != b.size:
        raise ValueError("equal sample sizes required; use w1_sample_vs_law for a continuous law")
    if a.size == 0:
        raise ValueError("empty samples")
    return float(np.mean(np.abs(a - b)))


def _gauss_primitive(x, m, s):
    # integral of Phi((t - m)/s) dt from -inf to x
    z = (x - m) / s
    return s * (z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi))


def _gauss_tail(x, m, s):
    # integral of 1 - Phi((t - m)/s) dt from x to inf
    z = (x - m) / s
    return s * (np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi) - z * ndtr(-z))


def w1_sample_vs_law(a, law):
    """W1 between the empirical measure of ``a`` and a 1D Gaussian law.

    Integrates |F_emp - Phi| piecewise in closed form: on each gap between
    order statistics the empirical CDF is a constant level c, split at the
    point where Phi crosses c.
    """
    m, s = _law_1d(law)
    a = np.sort(np.asarray(a, dtype=float).ravel())
    n = a.size
    if n == 0:
        raise ValueError("empty samples")
    if s == 0.0:
        return float(np.mean(np.abs(a - m)))
    total = _gauss_primitive(a[0], m, s) + _gauss_tail(a[-1], m, s)
    if n > 1:
        u, v = a[:-1], a[1:]
        c = np.arange(1, n) / n
        q = np.clip(m + s * ndtri(c), u, v)
        hu, hq, hv = (_gauss_primitive(t, m, s) for t in (u, q, v))
        below = c * (q - u) - (hq - hu)
        above = (hv - hq) - c * (v - q)
        total += float(np.sum(below + above))
    return float(total)


def _law_1d(law):
    mean = np.atleast_1d(np.asarray(law.mean, dtype=float))
    cov = np.atleast_2d(np.asarray(law.cov, dtype=float))
    if mean.size != 1:
        raise ValueError("one-dimensional law required")
    return float(mean[0]), math.sqrt(max(float(cov[0, 0]), 0.0))


def w1_sample_vs_density(a, density):
    """W1 between samples and a :class:`~rbmlab.meanfield.DensityField1D` (piecewise-linear CDF)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    faces = density.faces
    cdf = np.concatenate([[0.0], np.cumsum(density.values) * density.dx])
    grid = np.union1d(faces, a)
    f_law = np.interp(grid, faces, cdf, left=0.0, right=cdf[-1])
    f_emp = np.searchsorted(a, grid, side="right") / a.size
    # f_emp is right-continuous and piecewise constant on [g_k, g_{k+1}); f_law is linear there
    diff0, diff1 = f_emp[:-1] - f_law[:-1], f_emp[:-1] - f_law[1:]
    return float(np.sum(_abs_linear_integral(diff0, diff1, np.diff(grid))))


def _abs_linear_integral(y0, y1, h):
    # integral of |linear function from y0 to y1| over length h
    same = y0 * y1 >= 0
    out = np.where(same, 0.5 * h * np.abs(y0 + y1), 0.0)
    denom = np.where(same, 1.0, np.abs(y0) + np.abs(y1))
    cross = 0.5 * h * (y0 * y0 + y1 * y1) / denom
    return np.where(same, out, cross)


def random_directions(n_directions, dim, stream: RngStream):
    z = stream.normal(n_directions * dim).reshape(n_directions, dim)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def sliced_w1(a, b, n_directions, stream: RngStream = None, directions=None):
    """Mean over unit directions u of W1 between the projections a.u and b.u."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("a and b must be (N, d) arrays of equal shape")
    if directions is None:
        if n_directions < 1:
            raise ValueError("n_directions must be >= 1")
        stream = stream or RngStream(0, 0, DIRECTIONS, 0)
        directions = random_directions(n_directions, a.shape[1], stream)
    directions = np.atleast_2d(directions)
    return float(np.mean([w1_empirical_1d(a @ u, b @ u) for u in directions]))


_MOMENT_ORDERS = (2, 4, 6, 8)


def moments(ens, orders=(2, 4)):
    """(1/N) sum |x_i|^k for each even order k."""
    x = np.asarray(getattr(ens, "positions", ens), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    bad = [k for k in orders if k not in _MOMENT_ORDERS]
    if bad:
        raise ValueError(f"orders must be among {_MOMENT_ORDERS}, got {bad}")
    r2 = np.sum(x * x, axis=1)
    return {k: float(np.mean(r2 ** (k // 2))) for k in orders}


def gaussian_kl(m1, s1, m0, s0):
    """KL(N(m1, s1) || N(m0, s0)) for mean vectors and covariance matrices."""
    m1, m0 = np.atleast_1d(m1).astype(float), np.atleast_1d(m0).astype(float)
    s1, s0 = np.atleast_2d(s1).astype(float), np.atleast_2d(s0).astype(float)
    d = m1.size
    c0 = np.linalg.cholesky(s0)
    c1 = np.linalg.cholesky(s1)
    a = np.linalg.solve(c0, c1)
    dm = np.linalg.solve(c0, m1 - m0)
    logdet = 2.0 * (np.sum(np.log(np.diag(c0))) - np.sum(np.log(np.diag(c1))))
    kl = 0.5 * (np.sum(a * a) + dm @ dm - d + logdet)
    return max(float(kl), 0.0)


def kl_gaussian_fit(samples, ref):
    """KL from the moment-matched Gaussian of ``samples`` to the law ``ref``.

    Exact for the linear test models (Gaussian marginals). It sees one-particle
    marginals only, never the N-particle joint law.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n <= d:
        raise ValueError(f"need more samples than dimensions (N={n}, d={d}); increase N")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    if np.linalg.eigvalsh(cov).min() <= 1e-12:
        raise ValueError("sample covariance is singular; increase N or check for collapsed particles")
    return gaussian_kl(mean, cov, ref.mean, ref.cov)


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: list
    floor: float = 0.0
    dropped: list = field(default_factory=list)

    def predict(self, x):
        return math.exp(self.intercept) * np.asarray(x, dtype=float) ** self.slope + self.floor


def fit_rate(points, floor=0.0):
    """Least-squares line through (ln x, ln(y - floor)); the slope is the order.

    With a nonzero ``floor`` (the sampling plateau estimated separately),
    points that do not clear it are dropped and listed in ``dropped``.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if floor == 0.0:
        bad = [p for p in pts if not (p[0] > 0 and p[1] > 0)]
        if bad:
            raise ValueError(f"rate fit needs positive values, got {bad}")
    kept = [(x, y - floor) for x, y in pts if x > 0 and y - floor > 0]
    dropped = [(x, y) for x, y in pts if not (x > 0 and y - floor > 0)]
    if len(kept) < 3:
        raise ValueError(f"rate fit needs >= 3 usable points, have {len(kept)}")
    lx = np.log([x for x, _ in kept])
    ly = np.log([y for _, y in kept])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), min(max(r2, 0.0), 1.0),
                   list(zip(lx.tolist(), ly.tolist())), float(floor), dropped)


def moment_observer(orders=(2, 4)):
    def observe(ens, record, replica):
        for k, v in moments(ens, orders).items():
            record.add(ens.time, f"moment_{k}", v, replica)
    return observe


def summary_observer(reference=None):
    """Mean and variance of the first coordinate, plus W1/KL against a Gaussian reference path.

    ``reference`` maps a time to a GaussianLaw (e.g. a cached ``gaussian_reference``).
    """
    def observe(ens, record, replica):
        x = ens.positions
        record.add(ens.time, "mean", float(np.mean(x[:, 0])), replica)
        record.add(ens.time, "var", float(np.var(x[:, 0])), replica)
        if reference is not None:
            law = reference(ens.time)
            if x.shape[1] == 1:
                record.add(ens.time, "w1_reference", w1_sample_vs_law(x[:, 0], law), replica)
            if x.shape[0] > x.shape[1]:
                try:
                    record.add(ens.time, "kl_gaussian_fit", kl_gaussian_fit(x, law), replica)
                except ValueError:
                    pass
    return observe
