"""Time the hot kernels and a full RBM step on the compiled core and the numpy fallback.

    python benchmarks/bench_backends.py [--sizes 512 2048 8192] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from rbmlab import backend
from rbmlab import integrator as integ
from rbmlab.model import KERNEL_LINEAR, builtin_model
from rbmlab.rng import PARTITION


def kernel_cases(kern, n, d=1, p=2):
    x = np.linspace(-1.0, 1.0, n * d).reshape(n, d)
    members = kern.shuffle_partition(0, 0, PARTITION, 0, n, p)[1]
    force = np.zeros_like(x)
    noise = kern.noise_block(0, 0, 0, n, d)
    return {
        "noise_block": lambda: kern.noise_block(0, 0, 3, n, d),
        "shuffle_partition": lambda: kern.shuffle_partition(0, 0, PARTITION, 3, n, p),
        "batch_forces": lambda: kern.batch_forces(x, members, KERNEL_LINEAR, 1.0),
        "linear_drift_update": lambda: kern.linear_drift_update(x, 1.0, force, noise, 0.01, 0.1),
    }


def step_case(n):
    model = builtin_model("linear_interacting", {"a": 1, "kappa": 1})
    cfg = integ.SimConfig(N=n, tau=0.01, T=0.1, model=model, p=2, init=integ.InitialLaw("gaussian"))
    return lambda: integ.run(cfg)


def best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[512, 2048, 8192])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    names = backend.available()
    if "compiled" not in names:
        print("compiled core not built; timing the numpy kernels only")
    print(f"{'kernel':<22}{'N':>7}" + "".join(f"{b + ' (us)':>16}" for b in names)
          + ("   speedup" if len(names) > 1 else ""))
    for n in args.sizes:
        rows = {}
        for b in names:
            with backend.use(b) as kern:
                cases = kernel_cases(kern, n)
                cases["rbm run, 10 steps"] = step_case(n)
                for label, fn in cases.items():
                    rows.setdefault(label, {})[b] = best(fn, args.repeat) * 1e6
        for label, t in rows.items():
            line = f"{label:<22}{n:>7}" + "".join(f"{t[b]:>16.1f}" for b in names)
            if len(names) > 1:
                line += f"{t['python'] / t['compiled']:>9.1f}x"
            print(line)


if __name__ == "__main__":
    main()
