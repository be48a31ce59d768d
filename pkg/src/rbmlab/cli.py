"""``rbmlab`` command line: simulate, sweep, check, reference, bench.

Exit codes: 0 ok, 2 config error, 3 numerical abort, 4 partial sweep
(more than 25% of replicas aborted), 5 assumption failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, backend
from . import integrator as integ
from .config import load_config
from .errors import ConfigError, NumericalAbort
from .meanfield import DensityField1D, GaussianReferenceCache, fp_solve_1d, gaussian_path, law_distance
from .metrics import MetricsRecord, moment_observer, summary_observer
from .model import check_assumptions
from .rng import SAMPLING, RngStream
from .sweep import OBSERVABLES, SweepPlan, moment_uniformity_check, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_PARTIAL, EXIT_ASSUMPTION = 0, 2, 3, 4, 5
PARTIAL_THRESHOLD = 0.25
DEFAULT_OUT = "rbmlab-out"


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Outputs:
    """Output directory bookkeeping; every file written goes through :meth:`path`."""

    def __init__(self, root, config, seed, command):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.config, self.seed, self.command = config, seed, command
        self.files = []
        self.started = _now()

    def path(self, name):
        full = os.path.abspath(os.path.join(self.root, name))
        if os.path.dirname(full) != self.root:
            raise ConfigError(f"output name {name!r} escapes the output directory")
        self.files.append(name)
        return full

    def add(self, full_paths):
        for p in full_paths:
            rel = os.path.relpath(p, self.root)
            if rel.startswith(".."):
                raise ConfigError(f"output {p!r} escapes the output directory")
            self.files.append(rel)

    def write_manifest(self, status):
        manifest = {
            "command": self.command,
            "config_digest": self.config.digest(),
            "seed": self.seed,
            "version": __version__,
            "backend": backend.name(),
            "started": self.started,
            "finished": _now(),
            "status": status,
            "outputs": sorted(set(self.files)),
        }
        with open(os.path.join(self.root, f"{self.command}_manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(self.root, f"{self.command}_config.ini"), "w") as fh:
            fh.write(self.config.canonical())


def _seed(args, config):
    return args.seed if args.seed is not None else config.get_int("simulation", "seed", 0)


def _pool_map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def cmd_simulate(args, config):
    seed = _seed(args, config)
    cfg = config.sim_config(seed)
    out = Outputs(args.out, config, seed, "simulate")
    orders = config.get_list("simulation", "moments", int, [2, 4])
    stride = config.get_int("simulation", "stride", max(1, cfg.n_steps // 100))
    traj = config.get_bool("simulation", "trajectory")
    traj_stride = config.get_int("simulation", "trajectory_stride", stride)
    if stride < 1 or traj_stride < 1:
        raise ConfigError("[simulation] stride: must be >= 1")
    reference = None
    if cfg.model.is_linear:
        d = cfg.model.dim
        reference = (cfg.init.mean_vector(d), cfg.init.covariance(d))

    def one(replica):
        observers = [summary_observer(GaussianReferenceCache(cfg.model, *reference) if reference else None),
                     moment_observer(orders)]
        close = None
        if traj:
            obs, close = integ.trajectory_writer(out_paths[replica], traj_stride)
            observers.append(obs)
        try:
            ens, rec = integ.run(cfg, observers, replica=replica, stride=stride)
            return ens, rec, None
        except NumericalAbort as exc:
            return None, exc.record or MetricsRecord(), exc
        finally:
            if close:
                close()

    out_paths = {r: out.path(f"trajectory_r{r}.csv") for r in range(cfg.replicas)} if traj else {}
    results = _pool_map(one, list(range(cfg.replicas)), args.threads)
    record = MetricsRecord(metadata={"config_digest": config.digest(), "seed": seed})
    aborts = []
    for replica, (ens, rec, exc) in enumerate(results):
        record.extend(rec)
        if exc is not None:
            aborts.append((replica, exc))
        else:
            x = ens.positions
            print(f"replica {replica}: t = {ens.time:g}, mean = {np.mean(x, axis=0).tolist()}, "
                  f"var = {float(np.var(x[:, 0])):.6g}")
    record.write_csv(out.path("metrics.csv"))
    for replica, exc in aborts:
        print(f"replica {replica}: numerical abort: {exc}", file=sys.stderr)
    out.write_manifest("aborted" if aborts else "ok")
    print(f"wrote {len(out.files)} file(s) to {out.root}")
    return EXIT_ABORT if aborts else EXIT_OK


def _sweep_plan(config, seed, observable=None, vary=None, values=None, base=None):
    s = "sweep"
    if not config.has(s) and observable is None:
        raise ConfigError(f"{config.source}: missing [sweep] section")
    base = base or config.sim_config(seed)
    vary = vary or config.get(s, "vary", "tau")
    if values is None:
        values = config.get_list(s, "values", int if vary in ("N", "n", "p") else float, [])
    if not values:
        raise ConfigError(f"{config.source}: [sweep] values: the vary list is empty")
    observable = observable or config.get(s, "observable", None)
    if observable is None:
        raise ConfigError(f"{config.source}: [sweep] observable: required key missing; valid: {', '.join(OBSERVABLES)}")
    if observable not in OBSERVABLES:
        raise ConfigError(f"{config.source}: [sweep] observable: unknown {observable!r}; "
                          f"valid observables: {', '.join(OBSERVABLES)}")
    vary = {"n": "N"}.get(vary, vary)
    return SweepPlan(
        base=base, vary=vary, values=tuple(values), observable=observable,
        replicas=config.get_int(s, "replicas", 8 if observable != "step_wall_time" else 1),
        T=config.get_float(s, "t", None),
        anchor=config.get_float(s, "anchor", None),
        anchor_replicas=config.get_int(s, "anchor_replicas", None),
        fp_grid=(config.get_float(s, "fp_x_lo", -8.0), config.get_float(s, "fp_x_hi", 8.0),
                 config.get_int(s, "fp_cells", 400)),
    )


def _report_sweep(result, out, prefix):
    lines = result.summary_lines()
    print("\n".join(lines))
    out.add(result.write(os.path.join(out.root, prefix)))
    for v, r, err in result.failures:
        print(f"  abort at {result.plan.vary} = {v:g}, replica {r}: {err}", file=sys.stderr)


def cmd_sweep(args, config):
    seed = _seed(args, config)
    plan = _sweep_plan(config, seed)
    out = Outputs(args.out, config, seed, "sweep")
    result = run_sweep(plan, threads=args.threads)
    _report_sweep(result, out, f"sweep_{plan.observable}_{plan.vary}")
    partial = result.failed_fraction > PARTIAL_THRESHOLD
    out.write_manifest("partial" if partial else "ok")
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_bench(args, config):
    """Median per-step wall time against N, for RBM and the full system."""
    seed = _seed(args, config)
    values = config.get_list("sweep", "values", int, None) if config.get("sweep", "vary", "N") in ("N", "n") else None
    values = values or [512, 1024, 2048, 4096]
    base = config.sim_config(seed)
    out = Outputs(args.out, config, seed, "bench")
    integrators = [args.integrator] if args.integrator else ["rbm", "full_em"]
    with backend.use(args.backend or backend.name()):
        print(f"backend: {backend.name()}")
        for name in integrators:
            cfg = base.with_(integrator=name, T=args.steps * base.tau)
            plan = SweepPlan(cfg, "N", tuple(values), "step_wall_time", replicas=1)
            result = run_sweep(plan, threads=1)
            print(f"[{name}]")
            _report_sweep(result, out, f"bench_{name}")
    out.write_manifest("ok")
    return EXIT_OK


def cmd_check(args, config):
    seed = _seed(args, config)
    out = Outputs(args.out, config, seed, "check")
    model = config.model()
    n_samples = config.get_int("check", "n_samples", 100_000)
    radius = config.get_float("check", "box_radius", 10.0)
    report = check_assumptions(model, n_samples, radius, RngStream(seed, 0, SAMPLING, 0))
    lines = [f"model {model.label} {model.params}"] + report.lines()
    failures = report.gating_failures
    status = EXIT_OK
    if failures:
        lines.append("gating assumption failed: " + "; ".join(failures))
        status = EXIT_ASSUMPTION
    run_uniformity = config.get_bool("check", "uniformity", config.has("simulation"))
    if run_uniformity:
        if not report.confining and not args.force:
            lines.append("uniform-in-time moments: skipped (drift is not confining; use --force to run anyway)")
        else:
            cfg = config.sim_config(seed)
            orders = config.get_list("check", "orders", int, [2, 4])
            res = moment_uniformity_check(cfg, config.get_float("check", "t_long", 50.0), orders,
                                          replicas=config.get_int("check", "replicas", None))
            lines += res.lines()
            res.record.write_csv(out.path("uniformity_moments.csv"))
            if not res.passed:
                status = EXIT_ASSUMPTION
    with open(out.path("check_report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    if status == EXIT_ASSUMPTION and args.force:
        print("--force given: continuing despite failed assumptions")
        status = EXIT_OK
    out.write_manifest("ok" if status == EXIT_OK else "assumption_failure")
    return status


def cmd_reference(args, config):
    seed = _seed(args, config)
    model = config.model()
    r = "reference"
    want_gauss = config.get_bool(r, "gaussian", model.is_linear)
    want_fp = config.get_bool(r, "fp", model.dim == 1)
    if want_gauss and not model.is_linear:
        raise ConfigError(f"{config.source}: [reference] gaussian: the Gaussian closure needs a linear model, "
                          f"not {model.label!r}")
    if want_fp and model.dim != 1:
        raise ConfigError(f"{config.source}: [reference] fp: the finite-volume solver is one-dimensional")
    if not (want_gauss or want_fp):
        raise ConfigError(f"{config.source}: [reference]: nothing requested (gaussian and fp both false)")
    T = config.get_float(r, "t", config.get_float("simulation", "t", 2.0))
    if T < 0:
        raise ConfigError(f"{config.source}: [reference] t: must be >= 0")
    init = config.initial_law()
    d = model.dim
    out = Outputs(args.out, config, seed, "reference")

    law_T = None
    if want_gauss:
        every = config.get_float(r, "stride", T / 10 if T > 0 else 1.0)
        if not every > 0:
            raise ConfigError(f"{config.source}: [reference] stride: must be > 0")
        n_out = max(1, int(math.floor(T / every + 1e-9)))
        times = sorted(set([k * every for k in range(n_out + 1) if k * every <= T] + [T]))
        path = gaussian_path(model, init.mean_vector(d), init.covariance(d), times,
                             config.get_float(r, "dt_ode", 1e-3))
        with open(out.path("gaussian_reference.csv"), "w") as fh:
            head = ["time"] + [f"mean_{i}" for i in range(d)] + [f"cov_{i}_{j}" for i in range(d) for j in range(i, d)]
            fh.write(",".join(head) + "\n")
            for law in path:
                row = [law.time] + law.mean.tolist() + [law.cov[i, j] for i in range(d) for j in range(i, d)]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        law_T = path[-1]
        print(f"gaussian reference at T = {T:g}: mean {law_T.mean.tolist()}, var {law_T.var:.10g}")

    if want_fp:
        lo, hi = config.get_float(r, "x_lo", -8.0), config.get_float(r, "x_hi", 8.0)
        n_cells = config.get_int(r, "n_cells", 400)
        if not lo < hi or n_cells < 3:
            raise ConfigError(f"{config.source}: [reference] grid: need x_lo < x_hi and n_cells >= 3")
        if init.kind == "gaussian":
            rho0 = DensityField1D.gaussian(float(init.mean_vector(1)[0]), float(init.covariance(1)[0, 0]),
                                           lo, hi, n_cells)
        elif init.kind == "uniform":
            rho0 = DensityField1D.uniform(init.low, init.high, lo, hi, n_cells)
        else:
            raise ConfigError(f"{config.source}: [simulation] init: a point mass has no grid density; "
                              f"use gaussian or uniform for the FP reference")
        rho = fp_solve_1d(model, rho0, T, dt=config.get_float(r, "dt", None),
                          boundary_tol=config.get_float(r, "boundary_tol", 1e-8))
        rho0.write_csv(out.path("density_t0.csv"))
        rho.write_csv(out.path("density_T.csv"))
        dev = abs(rho.mass - rho0.mass)
        fm, fv = rho.moments()
        print(f"fp density at T = {T:g}: mean {fm:.10g}, var {fv:.10g} ({n_cells} cells on [{lo:g}, {hi:g}])")
        print(f"mass conservation: |mass(T) - mass(0)| = {dev:.3e}")
        if law_T is not None:
            w1, dm, dv = law_distance(law_T, rho)
            print(f"cross-validation at T = {T:g}: W1 gap {w1:.6e}, mean gap {dm:.3e}, variance gap {dv:.3e}")
    out.write_manifest("ok")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "check": cmd_check,
            "reference": cmd_reference, "bench": cmd_bench}


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    sup = argparse.SUPPRESS
    common.add_argument("--config", metavar="PATH", default=sup, help="INI configuration file")
    common.add_argument("--seed", type=_u64, default=sup, help="master seed (default: config value or 0)")
    common.add_argument("--threads", type=_positive, default=sup, help="worker threads (default: CPU count)")
    common.add_argument("--out", metavar="DIR", default=sup, help=f"output directory (default: {DEFAULT_OUT})")
    common.add_argument("--force", action="store_true", default=sup, help="continue past failed assumptions")

    parser = argparse.ArgumentParser(prog="rbmlab", parents=[common],
                                     description="Random Batch Method simulation and verification lab")
    parser.add_argument("--version", action="version", version=f"rbmlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"simulate": "run one simulation and write metrics",
             "sweep": "convergence sweep with a rate fit",
             "check": "sampled assumption checks and moment uniformity",
             "reference": "mean-field reference laws (Gaussian closure, finite volumes)",
             "bench": "per-step wall time against N (step_wall_time sweep)"}
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        p.add_argument("overrides", nargs="*", metavar="section.key=value")
        if name == "bench":
            p.add_argument("--steps", type=_positive, default=20, help="time steps per timing run")
            p.add_argument("--integrator", choices=integ.INTEGRATORS, help="time one integrator only")
            p.add_argument("--backend", choices=backend.available(), help="kernel backend to time")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in (("config", None), ("seed", None), ("threads", os.cpu_count() or 1),
                         ("out", DEFAULT_OUT), ("force", False)):
        if not hasattr(args, key):
            setattr(args, key, default)
    try:
        if args.config is None and args.command != "bench":
            raise ConfigError("--config PATH is required")
        config = load_config(args.config, args.overrides) if args.config else load_config(
            None, args.overrides, text="[model]\nname = linear_interacting\na = 1\nkappa = 1\n"
                                       "[simulation]\nn = 512\ntau = 0.01\nt = 0.2\n")
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
