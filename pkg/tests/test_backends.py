"""The compiled core and the numpy fallback implement the same kernels."""
import numpy as np
import pytest

from rbmlab import _pykernels, backend
from rbmlab import integrator as integ
from rbmlab.model import KERNEL_BOUNDED, KERNEL_LINEAR, KERNEL_ZERO, builtin_model
from rbmlab.rng import PARTITION

pytestmark = pytest.mark.skipif("compiled" not in backend.available(), reason="compiled core not built")


@pytest.fixture(scope="module")
def core():
    from rbmlab import _core
    return _core


def test_compiled_is_default_when_built():
    assert backend.name() in backend.available()


def test_use_restores_previous_backend():
    before = backend.name()
    with backend.use("python"):
        assert backend.name() == "python"
    assert backend.name() == before
    with pytest.raises(ValueError):
        backend.select("fortran")


@pytest.mark.parametrize("args", [(0, 0, 0, 0, 0, 13), (3, 9, 2**63, 17, 4, 64), (2**64 - 1, 1, 5, 2**64 - 1, 0, 3)])
def test_raw_and_uniform_identical(core, args):
    np.testing.assert_array_equal(core.raw(*args), _pykernels.raw(*args))
    np.testing.assert_array_equal(core.uniform(*args), _pykernels.uniform(*args))


def test_normals_agree(core):
    np.testing.assert_allclose(core.normal(1, 2, 3, 4, 5, 1001), _pykernels.normal(1, 2, 3, 4, 5, 1001),
                               rtol=0, atol=1e-14)
    for d in (1, 2, 3, 5):
        np.testing.assert_allclose(core.noise_block(4, 1, 7, 33, d), _pykernels.noise_block(4, 1, 7, 33, d),
                                   rtol=0, atol=1e-14)


@pytest.mark.parametrize("n,p", [(2, 2), (12, 3), (100, 4), (64, 64)])
def test_partitions_identical(core, n, p):
    for step in range(5):
        a1, m1 = core.shuffle_partition(8, 1, PARTITION, step, n, p)
        a2, m2 = _pykernels.shuffle_partition(8, 1, PARTITION, step, n, p)
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(m1, m2)
        assert np.all(np.diff(m1, axis=1) > 0)


@pytest.mark.parametrize("code", [KERNEL_ZERO, KERNEL_LINEAR, KERNEL_BOUNDED])
@pytest.mark.parametrize("d", [1, 3])
def test_batch_forces_agree(core, rng, code, d):
    x = rng.normal(size=(60, d))
    members = core.shuffle_partition(0, 0, PARTITION, 0, 60, 3)[1]
    np.testing.assert_allclose(core.batch_forces(x, members, code, 1.5),
                               _pykernels.batch_forces(x, members, code, 1.5), rtol=1e-13, atol=1e-14)


def test_generic_path_matches_coded_kernel(rng):
    model = builtin_model("bounded_kernel", {"a": 1, "kappa": 2, "dim": 2})
    x = rng.normal(size=(40, 2))
    members = _pykernels.shuffle_partition(0, 0, PARTITION, 1, 40, 4)[1]
    np.testing.assert_allclose(_pykernels.batch_forces_generic(x, members, model.kernel),
                               _pykernels.batch_forces(x, members, KERNEL_BOUNDED, 2.0), rtol=1e-13, atol=1e-15)


def test_updates_agree_and_flag_divergence(core, rng):
    x = rng.normal(size=(20, 2))
    f, z, b = rng.normal(size=(3, 20, 2))
    out1, bad1 = core.em_update(x, b, f, z, 0.1, 0.3)
    out2, bad2 = _pykernels.em_update(x, b, f, z, 0.1, 0.3)
    np.testing.assert_allclose(out1, out2, rtol=1e-15, atol=1e-15)
    assert bad1 == bad2 == -1
    x[7, 1] = 2e10
    for kern in (core, _pykernels):
        assert kern.linear_drift_update(x, 1.0, f, z, 0.1, 0.3)[1] == 7


def test_whole_runs_agree_across_backends():
    model = builtin_model("linear_interacting", {"a": 1, "kappa": 1})
    cfg = integ.SimConfig(N=64, tau=0.05, T=1.0, model=model, p=4, init=integ.InitialLaw("gaussian", 1.0, 1.0))
    with backend.use("compiled"):
        a, _ = integ.run(cfg)
    with backend.use("python"):
        b, _ = integ.run(cfg)
    np.testing.assert_allclose(a.positions, b.positions, rtol=0, atol=1e-12)
