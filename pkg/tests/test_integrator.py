import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from rbmlab import integrator as integ
from rbmlab import rng
from rbmlab.errors import ConfigError, NumericalAbort
from rbmlab.model import ModelSpec, builtin_model
from rbmlab.rng import RngStream


def zero(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def neg(z):
    return -np.asarray(z, dtype=float)


def make_model(drift=zero, kernel=neg, sigma=0.0, dim=1, interacting=True):
    return ModelSpec(dim=dim, drift=drift, kernel=kernel, sigma=sigma, interacting=interacting)


def cfg_for(model, N, tau=0.1, p=2, **kw):
    return integ.SimConfig(N=N, tau=tau, T=kw.pop("T", tau), model=model, p=p, **kw)


def set_partitions(N, p):
    """All partitions of range(N) into unordered batches of size p."""
    def rec(rest):
        if not rest:
            yield []
            return
        first = rest[0]
        for mates in itertools.combinations(rest[1:], p - 1):
            batch = (first,) + mates
            left = [i for i in rest if i not in batch]
            for tail in rec(left):
                yield [batch] + tail
    return list(rec(list(range(N))))


def partition_from_batches(batches, N, p):
    assign = np.empty(N, dtype=np.int64)
    for b, batch in enumerate(batches):
        assign[list(batch)] = b
    return integ.BatchPartition(assign, p, N // p)


def canonical(partition):
    return tuple(sorted(tuple(b) for b in partition.batches()))


# ---- configuration ----

def test_config_rejects_bad_batches():
    m = builtin_model("linear_interacting", {"a": 1, "kappa": 1})
    with pytest.raises(ConfigError, match=r"p=3 must divide N=10"):
        integ.SimConfig(N=10, tau=0.1, T=1, model=m, p=3)
    with pytest.raises(ConfigError):
        integ.SimConfig(N=10, tau=0.1, T=1, model=m, p=1)
    with pytest.raises(ConfigError):
        integ.SimConfig(N=10, tau=0.0, T=1, model=m)
    with pytest.raises(ConfigError):
        integ.SimConfig(N=10, tau=0.1, T=-1, model=m)
    with pytest.raises(ConfigError, match="N >= 2"):
        integ.SimConfig(N=1, tau=0.1, T=1, model=m, integrator="full_em")
    # p is irrelevant to the full system
    integ.SimConfig(N=10, tau=0.1, T=1, model=m, p=3, integrator="full_em")


def test_step_count_tolerates_representation_error():
    m = builtin_model("linear_ou", {"a": 1})
    assert integ.SimConfig(N=2, tau=0.1, T=2, model=m).n_steps == 20
    assert integ.SimConfig(N=2, tau=0.3, T=1, model=m).n_steps == 3
    assert integ.SimConfig(N=2, tau=0.3, T=0.2, model=m).n_steps == 0


def test_ensemble_rejects_nonfinite():
    with pytest.raises(NumericalAbort) as e:
        integ.ParticleEnsemble(np.array([[0.0], [np.nan]]))
    assert e.value.particle == 1


# ---- partitions ----

def test_partition_n2_single():
    for k in range(20):
        part = integ.sample_partition(2, 2, rng.partition_stream(0, 0, k))
        assert canonical(part) == ((0, 1),)


def test_partition_invariants():
    part = integ.sample_partition(30, 5, rng.partition_stream(1, 0, 3))
    assert part.n * part.p == 30
    assert np.all(np.bincount(part.assignment) == 5)
    assert sorted(np.concatenate(part.members).tolist()) == list(range(30))
    with pytest.raises(ValueError):
        integ.BatchPartition(np.array([0, 0, 0, 1]), 2, 2)
    with pytest.raises(ConfigError):
        integ.sample_partition(10, 3, rng.partition_stream(0, 0, 0))


@pytest.mark.parametrize("N,p,count", [(4, 2, 3), (6, 3, 10), (6, 2, 15)])
def test_enumeration_counts(N, p, count):
    assert len(set_partitions(N, p)) == count


def partition_frequencies(N, p, draws):
    from rbmlab import backend
    kern = backend.kernels()
    counts = {}
    for k in range(draws):
        members = kern.shuffle_partition(0, 0, rng.PARTITION, k, N, p)[1]
        key = tuple(sorted(map(tuple, members.tolist())))
        counts[key] = counts.get(key, 0) + 1
    return counts


@pytest.mark.parametrize("N,p,n_parts", [(4, 2, 3), (6, 3, 10)])
def test_partition_uniformity_chi_square(N, p, n_parts):
    draws = 10**5
    counts = partition_frequencies(N, p, draws)
    assert len(counts) == n_parts
    freq = np.array(list(counts.values()))
    assert chisquare(freq).pvalue > 1e-3
    if N == 4:
        assert np.all(np.abs(freq / draws - 1 / 3) < 0.01)


# ---- forces ----

def test_batch_force_examples():
    part = partition_from_batches([(0, 1)], 2, 2)
    assert integ.batch_force(np.array([[1.0], [-1.0]]), 0, part, neg)[0] == -2.0
    x = RngStream(0, 0, 0, 0).normal(7).reshape(7, 1)
    one = integ.BatchPartition.single(7)
    for i in range(7):
        assert integ.batch_force(x, i, one, neg)[0] == pytest.approx(integ.full_force(x, i, neg)[0], rel=1e-14)


def test_batch_force_average_over_pairings_equals_full_force():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    parts = [partition_from_batches(b, 4, 2) for b in set_partitions(4, 2)]
    avg = np.mean([integ.batch_force(x, 0, part, neg)[0] for part in parts])
    assert avg == pytest.approx(2.0)
    assert integ.full_force(x, 0, neg)[0] == pytest.approx(2.0)


def test_full_force_examples():
    assert integ.full_force(np.array([[1.0], [-1.0]]), 0, neg)[0] == -2.0
    assert np.all(integ.full_force(np.ones((4, 2)), 1, zero) == 0)
    assert integ.full_force(np.array([[0.0], [1.0], [2.0]]), 0, neg)[0] == 1.5
    with pytest.raises(ValueError):
        integ.full_force(np.zeros((1, 1)), 0, neg)


@pytest.mark.parametrize("N,p", [(4, 2), (6, 2), (6, 3)])
def test_exhaustive_unbiasedness(N, p):
    kernel = builtin_model("bounded_kernel", {"a": 1, "kappa": 1.7, "dim": 2}).kernel
    parts = [partition_from_batches(b, N, p) for b in set_partitions(N, p)]
    eps = np.finfo(float).eps
    for trial in range(100):
        x = RngStream(trial, 0, 0, 0).normal(N * 2).reshape(N, 2)
        for i in range(N):
            mean = np.mean([integ.batch_force(x, i, part, kernel) for part in parts], axis=0)
            assert np.max(np.abs(mean - integ.full_force(x, i, kernel))) <= 10 * eps * N


# ---- steps ----

def test_full_em_examples():
    m = make_model(kernel=zero, interacting=False)
    ens = integ.ParticleEnsemble(np.array([[0.3], [-2.0]]))
    out = integ.full_em_step(ens, cfg_for(m, 2), np.ones((2, 1)))
    np.testing.assert_array_equal(out.positions, ens.positions)
    assert (out.time, out.step) == (pytest.approx(0.1), 1)

    m = make_model()
    out = integ.full_em_step(integ.ParticleEnsemble(np.array([[1.0], [-1.0]])), cfg_for(m, 2), np.zeros((2, 1)))
    np.testing.assert_allclose(out.positions[:, 0], [0.8, -0.8], rtol=1e-15)

    m = make_model(drift=neg, kernel=zero, interacting=False)
    out = integ.full_em_step(integ.ParticleEnsemble(np.array([[2.0]])), cfg_for(m, 1, integrator="full_em"),
                             np.zeros((1, 1)))
    assert out.positions[0, 0] == pytest.approx(1.8)


def test_rbm_step_examples():
    m = make_model()
    cfg = cfg_for(m, 2)
    out = integ.rbm_step(integ.ParticleEnsemble(np.array([[1.0], [-1.0]])), partition_from_batches([(0, 1)], 2, 2),
                         cfg, np.zeros((2, 1)))
    np.testing.assert_allclose(out.positions[:, 0], [0.8, -0.8], rtol=1e-15)
    x = integ.ParticleEnsemble(np.array([[0.0], [1.0], [2.0], [3.0]]))
    out = integ.rbm_step(x, partition_from_batches([(0, 1), (2, 3)], 4, 2), cfg_for(m, 4), np.zeros((4, 1)))
    np.testing.assert_allclose(out.positions[:, 0], [0.1, 0.9, 2.1, 2.9], rtol=1e-14)


@given(st.integers(2, 12), st.integers(0, 2**32), st.sampled_from(["linear_interacting", "bounded_kernel"]))
def test_rbm_with_one_batch_is_full_step(N, seed, name):
    m = builtin_model(name, {"a": 1, "kappa": 0.7, "sigma": 0.5, "dim": 2})
    x = integ.ParticleEnsemble(RngStream(seed, 0, 0, 0).normal(2 * N).reshape(N, 2))
    z = rng.noise_block(seed, 0, 0, N, 2)
    cfg = cfg_for(m, N, p=N)
    np.testing.assert_array_equal(integ.rbm_step(x, integ.BatchPartition.single(N), cfg, z).positions,
                                  integ.full_em_step(x, cfg, z).positions)


def test_step_divergence_names_particle():
    m = make_model(drift=lambda x: 1e12 * np.asarray(x), kernel=zero, interacting=False)
    x = np.zeros((5, 1))
    x[3] = 1.0
    with pytest.raises(NumericalAbort, match="particle 3") as e:
        integ.full_em_step(integ.ParticleEnsemble(x), cfg_for(m, 5, integrator="full_em"), np.zeros((5, 1)))
    assert e.value.particle == 3


def test_translation_equivariance():
    bounded = builtin_model("bounded_kernel", {"a": 1, "kappa": 2}).kernel
    lin = make_model()  # b = 0, K = -z; dyadic data keeps every operation exact
    x = np.arange(8, dtype=float)[:, None] / 4
    part = integ.sample_partition(8, 2, rng.partition_stream(0, 0, 0))
    z = np.zeros((8, 1))
    cfg = cfg_for(lin, 8, tau=0.125)
    c = 3.0
    a = integ.rbm_step(integ.ParticleEnsemble(x), part, cfg, z).positions
    b = integ.rbm_step(integ.ParticleEnsemble(x + c), part, cfg, z).positions
    np.testing.assert_array_equal(b, a + c)
    # nonlinear kernel with noise: equal up to rounding
    cfg = cfg_for(make_model(kernel=bounded, sigma=0.7), 8)
    noise = rng.noise_block(0, 0, 0, 8, 1)
    xr = RngStream(2, 0, 0, 0).normal(8)[:, None]
    a = integ.rbm_step(integ.ParticleEnsemble(xr), part, cfg, noise).positions
    b = integ.rbm_step(integ.ParticleEnsemble(xr + c), part, cfg, noise).positions
    np.testing.assert_allclose(b, a + c, rtol=0, atol=1e-13)


def test_permutation_equivariance_full_step():
    m = builtin_model("bounded_kernel", {"a": 1, "kappa": 1.3, "sigma": 0.4, "dim": 2})
    N = 9
    x = RngStream(5, 0, 0, 0).normal(2 * N).reshape(N, 2)
    z = rng.noise_block(5, 0, 0, N, 2)
    perm = np.array([4, 0, 8, 2, 7, 1, 3, 6, 5])
    cfg = cfg_for(m, N, integrator="full_em")
    a = integ.full_em_step(integ.ParticleEnsemble(x), cfg, z).positions
    b = integ.full_em_step(integ.ParticleEnsemble(x[perm]), cfg, z[perm]).positions
    np.testing.assert_allclose(b, a[perm], rtol=1e-13, atol=1e-14)


class CountingKernel:
    def __init__(self):
        self.rows = 0

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        self.rows += int(np.prod(z.shape[:-1]))
        return -z


@pytest.mark.parametrize("N,p", [(12, 2), (12, 3), (30, 5)])
def test_kernel_evaluation_counts(N, p):
    k = CountingKernel()
    m = make_model(kernel=k)
    x = integ.ParticleEnsemble(RngStream(0, 0, 0, 0).normal(N)[:, None])
    part = integ.sample_partition(N, p, rng.partition_stream(0, 0, 0))
    k.rows = 0  # construction probes the kernel once
    integ.rbm_step(x, part, cfg_for(m, N, p=p), np.zeros((N, 1)))
    assert k.rows == N * (p - 1)
    k.rows = 0
    integ.full_em_step(x, cfg_for(m, N, p=p, integrator="full_em"), np.zeros((N, 1)))
    assert k.rows == N * (N - 1)


# ---- interpolation ----

def test_interpolate_examples():
    m = make_model(drift=neg, sigma=0.0)
    cfg = cfg_for(m, 4)
    ens = integ.ParticleEnsemble(np.array([[0.0], [1.0], [2.0], [3.0]]), time=0.0, step=0)
    part = partition_from_batches([(0, 3), (1, 2)], 4, 2)
    z = np.zeros((4, 1))
    same = integ.interpolate(ens, part, cfg, 0.0, z)
    np.testing.assert_array_equal(same.positions, ens.positions)
    full = integ.rbm_step(ens, part, cfg, z).positions
    half = integ.interpolate(ens, part, cfg, 0.05, z).positions
    np.testing.assert_allclose(half - ens.positions, 0.5 * (full - ens.positions), rtol=1e-14)
    near = integ.interpolate(ens, part, cfg, 0.1 - 1e-12, z).positions
    np.testing.assert_allclose(near, full, atol=1e-10)
    for bad in (-0.01, 0.1, 0.2):
        with pytest.raises(ValueError):
            integ.interpolate(ens, part, cfg, bad, z)


def test_interpolate_bridge_and_variance():
    m = builtin_model("linear_ou", {"a": 1, "sigma": 0.8})
    N = 20000
    cfg = cfg_for(m, N, tau=0.2)
    ens = integ.ParticleEnsemble(np.zeros((N, 1)))
    part = integ.sample_partition(N, 2, rng.partition_stream(0, 0, 0))
    step_noise = rng.noise_block(0, 0, 0, N, 1)
    bridge = rng.noise_block(0, 0, 1000, N, 1)
    # unconditional increment variance 2 sigma s
    free = integ.interpolate(ens, part, cfg, 0.05, bridge).positions
    assert np.var(free) == pytest.approx(2 * 0.8 * 0.05, rel=0.05)
    # bridge pinned at the step endpoint
    end = integ.rbm_step(ens, part, cfg, step_noise).positions
    almost = integ.interpolate(ens, part, cfg, 0.2 - 1e-13, bridge, step_noise=step_noise).positions
    np.testing.assert_allclose(almost, end, atol=1e-5)


# ---- runs ----

def linear_cfg(**kw):
    m = builtin_model("linear_interacting", {"a": 1, "kappa": 1, "sigma": 1})
    base = dict(N=16, tau=0.05, T=0.5, model=m, p=2, init=integ.InitialLaw("gaussian", 1.0, 1.0))
    base.update(kw)
    return integ.SimConfig(**base)


def test_run_zero_steps_returns_initial():
    cfg = linear_cfg(T=0.01)
    ens, rec = integ.run(cfg)
    np.testing.assert_array_equal(ens.positions, integ.initial_ensemble(cfg).positions)
    assert ens.step == 0


@pytest.mark.parametrize("N,T", [(8, 1.0), (6, 0.3)])
def test_run_rbm_p_equals_n_is_full_em(N, T):
    cfg = linear_cfg(N=N, p=N, T=T)
    a, _ = integ.run(cfg)
    b, _ = integ.run(cfg.with_(integrator="full_em"))
    np.testing.assert_array_equal(a.positions, b.positions)


def test_run_is_deterministic_and_replica_keyed():
    cfg = linear_cfg()
    a, ra = integ.run(cfg, replica=2)
    b, rb = integ.run(cfg, replica=2)
    c, _ = integ.run(cfg, replica=3)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)
    assert ra.metadata["replica"] == 2


def test_independent_noise_mode_decouples_full_system():
    cfg = linear_cfg(N=8, p=8)
    a, _ = integ.run(cfg.with_(integrator="full_em", coupling="independent"))
    b, _ = integ.run(cfg)
    assert not np.array_equal(a.positions, b.positions)


def test_observer_strides_and_final_call():
    seen = []
    cfg = linear_cfg(T=0.5)  # 10 steps
    integ.run(cfg, observers=[lambda e, r, k: seen.append(e.step)], stride=3)
    assert seen == [0, 3, 6, 9, 10]


def test_time_is_step_times_tau():
    ens, _ = integ.run(linear_cfg(tau=0.1, T=2.0))
    assert ens.step == 20 and ens.time == 20 * 0.1


def test_abort_carries_partial_record():
    m = builtin_model("linear_ou", {"a": -60, "sigma": 1}, allow_unconfined=True)
    cfg = integ.SimConfig(N=4, tau=0.1, T=10, model=m, init=integ.InitialLaw("gaussian"))
    obs = lambda e, rec, k: rec.add(e.time, "max", float(np.max(np.abs(e.positions))), k)
    with pytest.raises(NumericalAbort) as e:
        integ.run(cfg, observers=[obs])
    assert e.value.record is not None and len(e.value.record.entries) > 1


def test_initial_laws():
    m = builtin_model("linear_ou", {"a": 1})
    N = 20000
    gauss = integ.initial_ensemble(integ.SimConfig(N=N, tau=1, T=0, model=m,
                                                   init=integ.InitialLaw("gaussian", 2.0, 0.25))).positions
    assert abs(gauss.mean() - 2.0) < 4 * 0.5 / math.sqrt(N)
    assert np.var(gauss) == pytest.approx(0.25, rel=0.05)
    uni = integ.initial_ensemble(integ.SimConfig(N=N, tau=1, T=0, model=m,
                                                 init=integ.InitialLaw("uniform", low=-1, high=3))).positions
    assert uni.min() >= -1 and uni.max() < 3 and abs(uni.mean() - 1) < 0.05
    point = integ.initial_ensemble(integ.SimConfig(N=6, tau=1, T=0, model=m, init=integ.InitialLaw("point", 1.5)))
    assert np.all(point.positions == 1.5)
    with pytest.raises(ConfigError):
        integ.InitialLaw("cauchy")
    with pytest.raises(ConfigError):
        integ.InitialLaw("uniform", low=1, high=0)


def test_ou_variance_from_point_mass():
    m = builtin_model("linear_ou", {"a": 1, "sigma": 1})
    cfg = integ.SimConfig(N=10**4, tau=0.01, T=10, model=m, init=integ.InitialLaw("point", 0.0))
    ens, _ = integ.run(cfg)
    # EM stationary variance of OU: 2 sigma tau / (1 - (1 - a tau)^2)
    v_em = 2 * 0.01 / (1 - 0.99 ** 2)
    assert abs(np.var(ens.positions) - v_em) < 4 * math.sqrt(2 / cfg.N)
    assert abs(np.var(ens.positions) - (1 - math.exp(-20))) < 0.05


def test_trajectory_csv(tmp_path):
    cfg = linear_cfg(N=4, T=0.2, model=builtin_model("linear_interacting", {"a": 1, "kappa": 1, "dim": 2}))
    obs, close = integ.trajectory_writer(tmp_path / "t.csv", stride=2)
    integ.run(cfg, observers=[obs], replica=1)
    close()
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "replica,step,time,particle,x_0,x_1"
    steps = {int(l.split(",")[1]) for l in lines[1:]}
    assert steps == {0, 2, 4}
    assert len(lines) == 1 + 3 * 4
