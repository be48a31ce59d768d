"""Convergence sweeps: vary tau, N or p, measure an observable at the horizon, fit the rate."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import integrator as integ
from .errors import ConfigError, NumericalAbort
from .meanfield import DensityField1D, fp_solve_1d, gaussian_reference
from .metrics import (MetricsRecord, RateFit, fit_rate, kl_gaussian_fit, moments, w1_sample_vs_density,
                      w1_sample_vs_law)

OBSERVABLES = ("mean_bias", "var_bias", "w1_vs_reference", "strong_error", "step_wall_time", "kl_fit")
AXES = ("tau", "N", "p")
MIN_STOCHASTIC_REPLICAS = 8
_NEEDS_REFERENCE = ("mean_bias", "var_bias", "w1_vs_reference", "kl_fit")


@dataclass(frozen=True)
class SweepPlan:
    """One varied axis of a base configuration plus the observable to record.

    ``anchor`` (tau axis) runs one extra, much smaller step size whose value
    is subtracted as the sampling floor before fitting.
    """

    base: integ.SimConfig
    vary: str
    values: tuple
    observable: str
    replicas: int = 8
    T: float | None = None
    anchor: float | None = None
    anchor_replicas: int | None = None
    fp_grid: tuple = (-8.0, 8.0, 400)
    output: str | None = None

    def __post_init__(self):
        if self.vary not in AXES:
            raise ConfigError(f"vary must be one of {AXES}, got {self.vary!r}")
        if self.observable not in OBSERVABLES:
            raise ConfigError(f"unknown observable {self.observable!r}; valid: {', '.join(OBSERVABLES)}")
        if len(self.values) == 0:
            raise ConfigError("sweep needs at least one value to vary")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.observable != "step_wall_time" and self.replicas < MIN_STOCHASTIC_REPLICAS:
            raise ConfigError(f"stochastic observable {self.observable} needs replicas >= "
                              f"{MIN_STOCHASTIC_REPLICAS}, got {self.replicas}")
        if self.anchor is not None and self.vary != "tau":
            raise ConfigError("a floor anchor is only meaningful for tau sweeps")
        for v in self.values:
            self.config_for(v)  # validates every entry
        if self.observable == "w1_vs_reference" and self.base.model.dim != 1:
            raise ConfigError("w1_vs_reference needs a one-dimensional model")

    @property
    def horizon(self):
        return self.base.T if self.T is None else self.T

    def config_for(self, value):
        cast = float if self.vary == "tau" else int
        cfg = self.base.with_(**{self.vary: cast(value)}, T=self.horizon)
        if self.observable == "strong_error":
            cfg = cfg.with_(integrator="rbm", coupling="coupled")
        return cfg


@dataclass
class SweepRow:
    value: float
    mean: float
    stderr: float
    n_ok: int
    n_failed: int
    samples: list = field(default_factory=list, repr=False)


@dataclass
class SweepResult:
    plan: SweepPlan
    rows: list
    fit: RateFit | None
    floor: float = 0.0
    floor_row: SweepRow | None = None
    failures: list = field(default_factory=list)
    fit_error: str | None = None

    @property
    def n_failed(self):
        return sum(r.n_failed for r in self.rows)

    @property
    def failed_fraction(self):
        total = sum(r.n_ok + r.n_failed for r in self.rows)
        return self.n_failed / total if total else 0.0

    @property
    def partial(self):
        return self.n_failed > 0

    def summary_lines(self):
        p = self.plan
        lines = [f"sweep over {p.vary}, observable {p.observable}, {p.replicas} replicas, T = {p.horizon:g}",
                 f"{p.vary:>10} {'mean':>14} {'stderr':>12} {'ok':>4} {'fail':>4}"]
        for r in self.rows:
            lines.append(f"{r.value:>10.6g} {r.mean:>14.6e} {r.stderr:>12.3e} {r.n_ok:>4d} {r.n_failed:>4d}")
        if self.floor_row is not None:
            lines.append(f"floor anchor {p.vary} = {self.floor_row.value:g}: {self.floor:.6e} "
                         f"(stderr {self.floor_row.stderr:.2e}), subtracted before fitting")
        if self.fit is not None:
            lines.append(f"fitted slope {self.fit.slope:.4f}  intercept {self.fit.intercept:.4f}  "
                         f"r^2 {self.fit.r_squared:.4f}  ({len(self.fit.points)} points)")
            if self.fit.dropped:
                lines.append(f"dropped (did not clear floor): {self.fit.dropped}")
        elif self.fit_error:
            lines.append(f"no rate fit: {self.fit_error}")
        lines += self._notes()
        if self.partial:
            lines.append(f"PARTIAL: {self.n_failed} replica(s) aborted ({100 * self.failed_fraction:.1f}%)")
        return lines

    def _notes(self):
        p = self.plan
        notes = []
        rel = [r.stderr / r.mean for r in self.rows if r.n_ok > 1 and r.mean > 0]
        if rel:
            worst = max(rel)
            notes.append(f"confidence: largest relative stderr {100 * worst:.1f}%"
                         + ("; noisy points weaken the slope, add replicas" if worst > 0.25 else ""))
        if p.observable == "kl_fit":
            notes.append("kl_fit compares moment-matched Gaussians of one-particle marginals: a surrogate for "
                         "the rescaled N-particle entropy, exact in law only for linear models")
        if p.vary == "tau":
            stable = [r.value for r in self.rows if r.n_failed == 0]
            if stable:
                notes.append(f"empirically stable tau (no aborts): up to {max(stable):g}")
        return notes

    def write(self, out_prefix):
        paths = []
        table = f"{out_prefix}_table.csv"
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.plan.vary, "mean", "stderr", "n_ok", "n_failed"])
            for r in self.rows:
                w.writerow([repr(r.value), repr(r.mean), repr(r.stderr), r.n_ok, r.n_failed])
        paths.append(table)
        fitp = f"{out_prefix}_fit.csv"
        with open(fitp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["observable", "vary", "slope", "intercept", "r_squared", "floor", "n_points"])
            if self.fit is not None:
                w.writerow([self.plan.observable, self.plan.vary, repr(self.fit.slope), repr(self.fit.intercept),
                            repr(self.fit.r_squared), repr(self.fit.floor), len(self.fit.points)])
        paths.append(fitp)
        summary = f"{out_prefix}_summary.txt"
        with open(summary, "w") as fh:
            fh.write("\n".join(self.summary_lines()) + "\n")
        paths.append(summary)
        return paths


class _Reference:
    """Mean-field law at the horizon: Gaussian closure for linear models, FP density otherwise."""

    def __init__(self, plan):
        cfg = plan.base
        model, init = cfg.model, cfg.init
        self.law = self.density = None
        if model.is_linear:
            d = model.dim
            self.law = gaussian_reference(model, init.mean_vector(d), init.covariance(d), plan.horizon)
        elif model.dim == 1:
            lo, hi, n = plan.fp_grid
            if init.kind == "gaussian":
                rho0 = DensityField1D.gaussian(float(init.mean_vector(1)[0]), float(init.covariance(1)[0, 0]),
                                               lo, hi, int(n))
            elif init.kind == "uniform":
                rho0 = DensityField1D.uniform(init.low, init.high, lo, hi, int(n))
            else:
                raise ConfigError("the finite-volume reference needs a gaussian or uniform initial law")
            self.density = fp_solve_1d(model, rho0, plan.horizon)
        else:
            raise ConfigError("no mean-field reference for nonlinear models in d > 1")

    def mean_var(self):
        if self.law is not None:
            return self.law.mean, self.law.var
        m, v = self.density.moments()
        return np.array([m]), v


def _observe(plan, cfg, replica, ref):
    obs = plan.observable
    if obs == "step_wall_time":
        times = []
        integ.run(cfg, replica=replica, timings=times)
        if not times:
            raise ConfigError("step_wall_time needs at least one step (T >= tau)")
        return float(np.median(times))
    if obs == "strong_error":
        a, _ = integ.run(cfg, replica=replica)
        b, _ = integ.run(cfg.with_(integrator="full_em"), replica=replica)
        return float(np.sqrt(np.mean(np.sum((a.positions - b.positions) ** 2, axis=1))))
    ens, _ = integ.run(cfg, replica=replica)
    x = ens.positions
    if obs == "mean_bias":
        m, _ = ref.mean_var()
        return float(np.linalg.norm(x.mean(axis=0) - m))
    if obs == "var_bias":
        _, v = ref.mean_var()
        return abs(float(np.trace(np.atleast_2d(np.cov(x, rowvar=False, bias=True)))) / x.shape[1] - v)
    if obs == "w1_vs_reference":
        if ref.law is not None:
            return w1_sample_vs_law(x[:, 0], ref.law)
        return w1_sample_vs_density(x[:, 0], ref.density)
    if obs == "kl_fit":
        if ref.law is None:
            raise ConfigError("kl_fit needs a linear model (Gaussian reference)")
        return kl_gaussian_fit(x, ref.law)
    raise ConfigError(f"unknown observable {obs!r}")


def _collect(plan, values, replicas, ref, threads):
    tasks = [(v, r) for v in values for r in range(replicas)]

    def work(task):
        v, r = task
        try:
            return task, _observe(plan, plan.config_for(v), r, ref), None
        except NumericalAbort as exc:
            return task, None, str(exc)

    if threads and threads > 1 and plan.observable != "step_wall_time":
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(work, tasks))
    else:
        done = [work(t) for t in tasks]
    results = {task: (val, err) for task, val, err in done}
    rows, failures = [], []
    for v in values:
        vals = []
        for r in range(replicas):
            val, err = results[(v, r)]
            if err is None:
                vals.append(val)
            else:
                failures.append((v, r, err))
        n_ok = len(vals)
        mean = float(np.mean(vals)) if vals else math.nan
        stderr = float(np.std(vals, ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else math.nan
        rows.append(SweepRow(float(v), mean, stderr, n_ok, replicas - n_ok, vals))
    return rows, failures


def run_sweep(plan, threads=None):
    """Run every (axis value, replica) pair, average per value and fit a log-log rate."""
    ref = _Reference(plan) if plan.observable in _NEEDS_REFERENCE else None
    rows, failures = _collect(plan, list(plan.values), plan.replicas, ref, threads)
    floor, floor_row = 0.0, None
    if plan.anchor is not None:
        (floor_row,), more = _collect(plan, [plan.anchor], plan.anchor_replicas or plan.replicas, ref, threads)
        failures += more
        floor = floor_row.mean if floor_row.n_ok else 0.0
    usable = [(r.value, r.mean) for r in rows if r.n_ok > 0]
    fit, fit_error = None, None
    try:
        fit = fit_rate(usable, floor=floor)
    except ValueError as exc:
        fit_error = str(exc)
    return SweepResult(plan, rows, fit, floor, floor_row, failures, fit_error)


@dataclass
class UniformityResult:
    passed: bool
    max_first_half: dict
    max_second_half: dict
    plateau: dict
    record: MetricsRecord
    reason: str = ""

    @property
    def max_moment(self):
        return {k: max(self.max_first_half[k], self.max_second_half[k]) for k in self.max_first_half}

    def lines(self):
        out = [f"uniform-in-time moments: {'PASS' if self.passed else 'FAIL'}" + (f" ({self.reason})" if self.reason else "")]
        for k in self.max_first_half:
            out.append(f"  order {k}: max on first half {self.max_first_half[k]:.6g}, "
                       f"second half {self.max_second_half[k]:.6g}, plateau {self.plateau[k]:.6g}")
        return out


def moment_uniformity_check(cfg, T_long, orders=(2, 4), replicas=None, tolerance=0.2):
    """Sample moments at every unit time up to T_long; pass iff the max over
    [T_long/2, T_long] stays within ``tolerance`` of the max over [0, T_long/2).

    Moments are averaged over ``replicas`` (default ``cfg.replicas``). A
    divergence abort counts as failure.
    """
    cfg = cfg.with_(T=float(T_long))
    stride = max(1, int(round(1.0 / cfg.tau)))
    n_rep = replicas or cfg.replicas
    record = MetricsRecord(metadata={"seed": cfg.seed})
    series = {k: {} for k in orders}

    def observe(ens, rec, replica):
        for k, v in moments(ens, orders).items():
            rec.add(ens.time, f"moment_{k}", v, replica)
            series[k].setdefault(ens.step, []).append(v)

    nan = {k: math.nan for k in orders}
    for r in range(n_rep):
        try:
            integ.run(cfg, observers=[observe], replica=r, stride=stride)
        except NumericalAbort as exc:
            record.extend(exc.record or MetricsRecord())
            return UniformityResult(False, nan, nan, nan, record, f"divergence: {exc}")
    half = cfg.n_steps // 2
    first, second, plateau = {}, {}, {}
    for k in orders:
        steps = sorted(series[k])
        avg = {s: float(np.mean(series[k][s])) for s in steps}
        a = [avg[s] for s in steps if s < half]
        b = [avg[s] for s in steps if s >= half]
        first[k] = max(a) if a else math.nan
        second[k] = max(b) if b else math.nan
        plateau[k] = float(np.mean(b)) if b else math.nan
    ok = all(second[k] <= (1.0 + tolerance) * first[k] for k in orders)
    reason = "" if ok else "moments drift upward in the second half"
    return UniformityResult(ok, first, second, plateau, record, reason)
