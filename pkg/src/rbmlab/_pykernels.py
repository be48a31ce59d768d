"""Pure numpy twins of the compiled kernels in ``_core.pyx``.

Used when the extension is not built, or when forced with
``RBMLAB_BACKEND=python``. Raw streams and partitions match the compiled
core exactly; floating output may differ in the last ulp (libm vs numpy
transcendentals, summation order).
"""
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_INV_2_53 = 2.0 ** -53
DIVERGENCE = 1e10


def _mulhilo(a, b):
    a_lo, a_hi = a & _LO32, a >> _S32
    b_lo, b_hi = b & _LO32, b >> _S32
    ll = a_lo * b_lo
    hl = a_hi * b_lo
    lh = a_lo * b_hi
    hh = a_hi * b_hi
    cross = (ll >> _S32) + (hl & _LO32) + lh
    hi = hh + (hl >> _S32) + (cross >> _S32)
    return hi, a * b


def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64-10 over arrays of counters (uint64, broadcastable)."""
    c0, c1, c2, c3 = (np.array(c, dtype=np.uint64, copy=True) for c in np.broadcast_arrays(c0, c1, c2, c3))
    k0 = np.full_like(c0, k0)
    k1 = np.full_like(c0, k1)
    with np.errstate(over="ignore"):
        for _ in range(10):
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            k0 = k0 + _W0
            k1 = k1 + _W1
    return c0, c1, c2, c3


def _blocks(k0, k1, lane, step, first, nblocks):
    ctr = np.arange(nblocks, dtype=np.uint64) + np.uint64(first + 1)
    words = philox4x64(ctr, np.uint64(lane), np.uint64(step), np.uint64(0), np.uint64(k0), np.uint64(k1))
    return np.stack(words, axis=-1)


def _u53(x):
    return (x >> _S11).astype(np.float64) * _INV_2_53


def _gauss(w):
    # w: (..., 4) raw words -> (..., 4) normals
    u1 = ((w[..., 0::2] >> _S11) + np.uint64(1)).astype(np.float64) * _INV_2_53
    th = 2.0 * np.pi * _u53(w[..., 1::2])
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(w.shape, dtype=np.float64)
    z[..., 0::2] = r * np.cos(th)
    z[..., 1::2] = r * np.sin(th)
    return z


def raw(k0, k1, lane, step, offset, n):
    nb = (n + 3) // 4
    return _blocks(k0, k1, lane, step, offset, nb).reshape(-1)[:n]


def uniform(k0, k1, lane, step, offset, n):
    return _u53(raw(k0, k1, lane, step, offset, n))


def normal(k0, k1, lane, step, offset, n):
    nb = (n + 3) // 4
    return _gauss(_blocks(k0, k1, lane, step, offset, nb)).reshape(-1)[:n]


def noise_block(k0, k1, step, n_particles, dim):
    nb = (dim + 3) // 4
    lanes = np.arange(n_particles, dtype=np.uint64)[:, None]
    ctr = np.arange(nb, dtype=np.uint64)[None, :] + np.uint64(1)
    words = philox4x64(ctr, lanes, np.uint64(step), np.uint64(0), np.uint64(k0), np.uint64(k1))
    z = _gauss(np.stack(words, axis=-1))
    return np.ascontiguousarray(z.reshape(n_particles, nb * 4)[:, :dim])


def shuffle_partition(k0, k1, lane, step, n_particles, p):
    n = n_particles
    u = uniform(k0, k1, lane, step, 0, max(n - 1, 0))
    pos = np.arange(n - 1, 0, -1)
    js = np.minimum((u * (pos + 1).astype(np.float64)).astype(np.int64), pos)
    perm = list(range(n))
    for i, j in zip(pos.tolist(), js.tolist()):
        perm[i], perm[j] = perm[j], perm[i]
    assign = np.empty(n, dtype=np.int64)
    assign[np.asarray(perm, dtype=np.int64)] = np.arange(n, dtype=np.int64) // p
    # stable argsort of batch labels lists each batch's members in ascending order
    members = np.argsort(assign, kind="stable").reshape(n // p, p)
    return assign, members


def _mate_offsets(p):
    idx = np.arange(p)
    return np.array([np.delete(idx, a) for a in idx], dtype=np.int64).reshape(p, p - 1)


_CHUNK = 1 << 21


def batch_forces_generic(x, members, kernel):
    """Mean of kernel(x_i - x_j) over batch-mates j, one kernel call per chunk.

    Exactly N * (p - 1) difference rows are passed to ``kernel``.
    """
    nbatch, p = members.shape
    d = x.shape[1]
    out = np.zeros_like(x)
    mates = members[:, _mate_offsets(p)]
    rows_per_i = nbatch * (p - 1) * d
    step = max(1, _CHUNK // max(rows_per_i, 1))
    for a0 in range(0, p, step):
        a1 = min(p, a0 + step)
        own = members[:, a0:a1]
        diff = x[own][:, :, None, :] - x[mates[:, a0:a1]]
        k = np.asarray(kernel(diff.reshape(-1, d)), dtype=np.float64).reshape(diff.shape)
        out[own] = k.sum(axis=2) / (p - 1)
    return out


def batch_forces(x, members, kernel_code, kappa):
    if kernel_code == 0:
        return np.zeros_like(x)
    if kernel_code == 1:
        return batch_forces_generic(x, members, lambda z: -kappa * z)

    def bounded(z):
        r2 = np.sum(z * z, axis=-1)
        return (kappa / (1.0 + r2))[:, None] * z

    return batch_forces_generic(x, members, bounded)


def _first_bad(out):
    bad = ~np.isfinite(out) | (np.abs(out) > DIVERGENCE)
    rows = np.flatnonzero(bad.any(axis=1))
    return int(rows[0]) if rows.size else -1


def em_update(x, drift, force, noise, tau, noise_scale):
    out = x + tau * drift + tau * force + noise_scale * noise
    return out, _first_bad(out)


def linear_drift_update(x, a, force, noise, tau, noise_scale):
    out = x + tau * ((-a) * x) + tau * force + noise_scale * noise
    return out, _first_bad(out)
