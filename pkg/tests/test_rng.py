import numpy as np
import pytest

from rbmlab import backend, rng
from rbmlab.rng import RngStream


def numpy_philox_raw(seed, replica, lane, step, offset, n):
    # numpy bumps the counter before each block, so start one below ours
    bitgen = np.random.Philox(key=np.array([seed, replica], dtype=np.uint64),
                              counter=np.array([offset, lane, step, 0], dtype=np.uint64))
    return bitgen.random_raw(n)


@pytest.mark.parametrize("key", [(0, 0, 0, 0, 0), (7, 3, 11, 5, 2), (2**64 - 1, 2**63 + 1, 2**64 - 1, 2**40, 9)])
def test_raw_words_match_numpy_philox(kernel_backend, key):
    ours = RngStream(*key).raw(37)
    np.testing.assert_array_equal(ours, numpy_philox_raw(*key, 37))


def test_same_stream_same_values(kernel_backend):
    s = RngStream(42, 1, 5, 9)
    np.testing.assert_array_equal(rng.gaussian_increment(s, 7), rng.gaussian_increment(RngStream(42, 1, 5, 9), 7))


def test_gaussian_increment_requires_positive_dim():
    with pytest.raises(ValueError):
        rng.gaussian_increment(RngStream(0, 0, 0, 0), 0)


def test_stream_fields_must_be_u64():
    with pytest.raises(ValueError):
        RngStream(-1, 0, 0, 0)
    with pytest.raises(ValueError):
        RngStream(0, 2**64, 0, 0)


def test_normal_mean_and_variance_bands():
    z = RngStream(0, 0, 3, 0).normal(10**6)
    assert abs(z.mean()) < 4e-3
    assert abs(z.var() - 1.0) < 6e-3


def test_uniform_range_and_mean():
    u = RngStream(1, 0, 0, 0).uniform(10**5)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)


def test_advance_continues_the_stream():
    s = RngStream(5, 0, 2, 1)
    full = s.raw(40)
    np.testing.assert_array_equal(s.advance(8).raw(32), full[8:])
    # partial blocks round up
    assert s.advance(5).offset == 2


def test_distinct_steps_give_distinct_shuffles():
    kern = backend.kernels()
    perms = {tuple(kern.shuffle_partition(0, 0, rng.PARTITION, k, 20, 2)[0]) for k in range(20)}
    assert len(perms) == 20


def test_partition_stream_is_reproducible():
    a = rng.partition_stream(3, 1, 8).uniform(50)
    b = rng.partition_stream(3, 1, 8).uniform(50)
    np.testing.assert_array_equal(a, b)
    assert rng.partition_stream(3, 1, 8).lane >= rng.TAG_BASE


def test_partition_and_noise_streams_uncorrelated():
    n = 10**5
    part = rng.partition_stream(0, 0, 4).uniform(n)
    noise = rng.particle_stream(0, 0, 0, 4).normal(n)
    assert abs(np.corrcoef(part, noise)[0, 1]) < 0.01


def test_particle_lane_cannot_enter_tag_space():
    with pytest.raises(ValueError):
        rng.particle_stream(0, 0, rng.TAG_BASE, 0)


def test_noise_block_rows_are_particle_streams(kernel_backend):
    block = rng.noise_block(9, 2, 6, 5, 3)
    for i in range(5):
        np.testing.assert_allclose(block[i], rng.gaussian_increment(rng.particle_stream(9, 2, i, 6), 3),
                                   rtol=0, atol=1e-15)


def test_noise_block_prefix_stable_in_n():
    # particle i's increment does not depend on how many particles exist
    np.testing.assert_array_equal(rng.noise_block(1, 0, 3, 10, 2), rng.noise_block(1, 0, 3, 50, 2)[:10])


def test_initial_draws_independent_of_step_noise():
    a = rng.initial_normals(0, 0, 100, 1).ravel()
    b = rng.noise_block(0, 0, 0, 100, 1).ravel()
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(rng.initial_uniforms(0, 0, 4, 2), rng.initial_uniforms(0, 0, 6, 2)[:4])
