"""Reference solutions of the nonlinear Fokker-Planck equation

    d_t rho = -div((b + K * rho) rho) + sigma Laplacian(rho).

For b(x) = -a x and K(z) = -kappa z the law stays Gaussian with
m' = -a m and S' = -2 (a + kappa) S + 2 sigma I (the convolution term is
-kappa (x - m)). For general 1D models an explicit upwind finite-volume
scheme with zero-flux walls is provided.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, ModelError, NumericalAbort


@dataclass(frozen=True)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        c = np.atleast_2d(np.asarray(self.cov, dtype=float)).copy()
        if c.shape != (m.size, m.size):
            raise ValueError(f"covariance shape {c.shape} does not match mean of length {m.size}")
        if not np.allclose(c, c.T, rtol=0, atol=1e-12 * max(1.0, abs(np.trace(c)))):
            raise ValueError("covariance must be symmetric")
        c = 0.5 * (c + c.T)
        if np.linalg.eigvalsh(c).min() < -1e-12 * max(np.trace(c), 1e-300):
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def dim(self):
        return self.mean.size

    @property
    def var(self):
        """Scalar variance (trace / d)."""
        return float(np.trace(self.cov)) / self.dim


def _gaussian_rhs(a, kappa, sigma, m, s):
    d = m.size
    return -a * m, -2.0 * (a + kappa) * s + 2.0 * sigma * np.eye(d)


def _rk4(a, kappa, sigma, m, s, h):
    k1m, k1s = _gaussian_rhs(a, kappa, sigma, m, s)
    k2m, k2s = _gaussian_rhs(a, kappa, sigma, m + 0.5 * h * k1m, s + 0.5 * h * k1s)
    k3m, k3s = _gaussian_rhs(a, kappa, sigma, m + 0.5 * h * k2m, s + 0.5 * h * k2s)
    k4m, k4s = _gaussian_rhs(a, kappa, sigma, m + h * k3m, s + h * k3s)
    m = m + h / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
    s = s + h / 6.0 * (k1s + 2 * k2s + 2 * k3s + k4s)
    return m, 0.5 * (s + s.T)


def gaussian_path(model, m0, v0, times, dt_ode=1e-3):
    """Gaussian mean-field laws at each of the nondecreasing ``times`` (RK4, step <= dt_ode)."""
    if not model.is_linear:
        raise ModelError(f"Gaussian closure is exact only for linear models, not {model.label!r}")
    a, kappa = model.linear_coefficients
    d = model.dim
    m = np.broadcast_to(np.asarray(m0, dtype=float), (d,)).copy()
    v = np.asarray(v0, dtype=float)
    s = v.copy() if v.ndim == 2 else np.diag(np.broadcast_to(v, (d,)).astype(float))
    out, t = [], 0.0
    for target in times:
        if target < t:
            raise ValueError("times must be nondecreasing and >= 0")
        span = target - t
        n = int(math.ceil(span / dt_ode - 1e-9)) if span > 0 else 0
        h = span / n if n else 0.0
        for _ in range(n):
            m, s = _rk4(a, kappa, model.sigma, m, s, h)
        t = target
        out.append(GaussianLaw(m, s, float(target)))
    return out


def gaussian_reference(model, m0, v0, T, dt_ode=1e-3):
    """Mean-field law at time T for ``linear_ou`` / ``linear_interacting``."""
    return gaussian_path(model, m0, v0, [T], dt_ode)[0]


class GaussianReferenceCache:
    """Callable t -> GaussianLaw, integrating forward incrementally (for observers)."""

    def __init__(self, model, m0, v0, dt_ode=1e-3):
        self.model, self.dt_ode = model, dt_ode
        self._law = gaussian_reference(model, m0, v0, 0.0, dt_ode)
        self._cache = {0.0: self._law}

    def __call__(self, t):
        if t in self._cache:
            return self._cache[t]
        if t < self._law.time:
            raise ValueError("reference queried backwards in time")
        law = gaussian_path(self.model, self._law.mean, self._law.cov, [t - self._law.time], self.dt_ode)[0]
        self._law = GaussianLaw(law.mean, law.cov, t)
        self._cache[t] = self._law
        return self._law


@dataclass(frozen=True)
class DensityField1D:
    """Cell averages of a probability density on a uniform grid over [x_lo, x_hi]."""

    x_lo: float
    x_hi: float
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        if v.ndim != 1 or v.size < 3:
            raise ValueError("values must be a 1D array of at least 3 cells")
        if not self.x_lo < self.x_hi:
            raise ValueError("x_lo must be < x_hi")
        object.__setattr__(self, "values", v)

    @property
    def n_cells(self):
        return self.values.size

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / self.n_cells

    @property
    def centers(self):
        return self.x_lo + (np.arange(self.n_cells) + 0.5) * self.dx

    @property
    def faces(self):
        return self.x_lo + np.arange(self.n_cells + 1) * self.dx

    @property
    def mass(self):
        return float(np.sum(self.values) * self.dx)

    def moments(self):
        """(mean, variance) with the exact within-cell uniform correction dx^2/12."""
        w = self.values * self.dx
        c = self.centers
        mean = float(np.sum(w * c) / np.sum(w))
        var = float(np.sum(w * (c - mean) ** 2) / np.sum(w)) + self.dx ** 2 / 12.0
        return mean, var

    def boundary_mass(self):
        return float((self.values[0] + self.values[-1]) * self.dx)

    @classmethod
    def from_cdf(cls, cdf, x_lo, x_hi, n_cells, time=0.0):
        """Exact cell averages of a law with the given CDF, renormalized to the box."""
        faces = np.linspace(x_lo, x_hi, n_cells + 1)
        mass = np.diff(cdf(faces))
        dx = (x_hi - x_lo) / n_cells
        return cls(x_lo, x_hi, mass / (mass.sum() * dx), time)

    @classmethod
    def gaussian(cls, mean, var, x_lo, x_hi, n_cells, time=0.0):
        s = math.sqrt(var)
        return cls.from_cdf(lambda x: ndtr((x - mean) / s), x_lo, x_hi, n_cells, time)

    @classmethod
    def uniform(cls, low, high, x_lo, x_hi, n_cells, time=0.0):
        return cls.from_cdf(lambda x: np.clip((x - low) / (high - low), 0.0, 1.0), x_lo, x_hi, n_cells, time)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "rho"])
            for x, r in zip(self.centers.tolist(), self.values.tolist()):
                w.writerow([repr(x), repr(r)])


def _kernel_matrix(model, grid):
    faces = grid.faces[1:-1]
    diff = (faces[:, None] - grid.centers[None, :])[..., None]
    return np.asarray(model.kernel(diff), dtype=float)[..., 0] * grid.dx


def fp_stability_bound(model, grid):
    """(max drift speed bound, largest dt keeping the upwind update positive)."""
    faces = grid.faces[1:-1]
    b = np.asarray(model.drift(faces[:, None]), dtype=float)[:, 0]
    kmat = _kernel_matrix(model, grid)
    vmax = float(np.max(np.abs(b)) + np.max(np.abs(kmat)) / grid.dx)
    rate = 2.0 * vmax / grid.dx + 2.0 * model.sigma / grid.dx ** 2
    return vmax, (1.0 / rate if rate > 0 else math.inf)


def fp_solve_1d(model, rho0, T, dt=None, boundary_tol=1e-8, on_step=None):
    """Explicit conservative finite-volume solve of the mean-field equation in 1D.

    Upwind drift flux with v = b + K * rho evaluated at cell faces (the
    convolution by direct quadrature over cells), centered diffusion flux,
    zero flux at both walls. ``dt=None`` picks 0.9 of the positivity bound;
    an explicit ``dt`` must satisfy vmax dt <= dx and 2 sigma dt <= dx^2.
    Raises if the final mass in the two wall cells exceeds ``boundary_tol``.
    """
    if model.dim != 1:
        raise ModelError("fp_solve_1d needs a one-dimensional model")
    if T < 0:
        raise ConfigError("T must be >= 0")
    dx = rho0.dx
    vmax, dt_pos = fp_stability_bound(model, rho0)
    if dt is None:
        dt = 0.9 * dt_pos if math.isfinite(dt_pos) else max(T, 1.0)
    else:
        if vmax * dt > dx * (1 + 1e-12):
            raise ConfigError(f"advection CFL violated: max|v| dt = {vmax * dt:.4g} > dx = {dx:.4g}")
        if 2.0 * model.sigma * dt > dx ** 2 * (1 + 1e-12):
            raise ConfigError(f"diffusion stability violated: 2 sigma dt = {2 * model.sigma * dt:.4g} > dx^2 = {dx ** 2:.4g}")
    n_steps = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    h = T / n_steps if n_steps else 0.0

    faces = rho0.faces[1:-1]
    b = np.asarray(model.drift(faces[:, None]), dtype=float)[:, 0]
    kmat = _kernel_matrix(model, rho0) if model.interacting else None
    sigma = model.sigma
    rho = rho0.values.copy()
    flux = np.zeros(rho.size + 1)
    for k in range(n_steps):
        v = b + kmat @ rho if kmat is not None else b
        left, right = rho[:-1], rho[1:]
        flux[1:-1] = np.maximum(v, 0.0) * left + np.minimum(v, 0.0) * right - sigma * (right - left) / dx
        rho = rho - (h / dx) * (flux[1:] - flux[:-1])
        low = rho.min()
        if low < -1e-12:
            raise NumericalAbort(f"negative density {low:.3g} at step {k + 1}; reduce dt", step=k + 1)
        if on_step is not None:
            on_step(k + 1, (k + 1) * h, rho)
    out = DensityField1D(rho0.x_lo, rho0.x_hi, rho, rho0.time + T)
    if out.boundary_mass() > boundary_tol:
        raise NumericalAbort(f"mass {out.boundary_mass():.3g} reached the walls; widen [x_lo, x_hi]")
    return out


def law_distance(g, f, refine=8):
    """(W1, |mean gap|, |variance gap|) between a 1D GaussianLaw and a DensityField1D.

    W1 is the integral of |CDF_f - CDF_g| by trapezoid quadrature on the cell
    faces refined ``refine`` times (CDF_f is piecewise linear there).
    """
    if g.dim != 1:
        raise ValueError("law_distance is one-dimensional")
    m, s = float(g.mean[0]), math.sqrt(float(g.cov[0, 0]))
    cdf_faces = np.concatenate([[0.0], np.cumsum(f.values) * f.dx])
    x = np.linspace(f.x_lo, f.x_hi, f.n_cells * refine + 1)
    cf = np.interp(x, f.faces, cdf_faces)
    cg = ndtr((x - m) / s) if s > 0 else (x >= m).astype(float)
    w1 = float(np.trapezoid(np.abs(cf - cg), x))
    # CDF mass of g outside the box
    if s > 0:
        z_lo, z_hi = (f.x_lo - m) / s, (f.x_hi - m) / s
        w1 += s * (z_lo * ndtr(z_lo) + math.exp(-0.5 * z_lo ** 2) / math.sqrt(2 * math.pi))
        w1 += s * (math.exp(-0.5 * z_hi ** 2) / math.sqrt(2 * math.pi) - z_hi * ndtr(-z_hi))
    fm, fv = f.moments()
    return w1, abs(fm - m), abs(fv - s * s)
