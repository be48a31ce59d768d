# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: Philox streams, batch shuffles, pairwise forces, EM update.

Every function here has a numpy twin in :mod:`rbmlab._pykernels` with the same
signature; integer outputs (raw streams, partitions) agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt, cos, sin, fabs, isfinite
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t rbm_mulhilo(uint64_t a, uint64_t b, uint64_t *hi) {
        unsigned __int128 prod = (unsigned __int128)a * (unsigned __int128)b;
        *hi = (uint64_t)(prod >> 64);
        return (uint64_t)prod;
    }
    static inline void rbm_philox(uint64_t c0, uint64_t c1, uint64_t c2, uint64_t c3,
                                  uint64_t k0, uint64_t k1, uint64_t *out) {
        uint64_t hi0, hi1, lo0, lo1;
        int r;
        for (r = 0; r < 10; r++) {
            lo0 = rbm_mulhilo(0xD2E7470EE14C6C93ULL, c0, &hi0);
            lo1 = rbm_mulhilo(0xCA5A826395121157ULL, c2, &hi1);
            c0 = hi1 ^ c1 ^ k0;
            c1 = lo1;
            c2 = hi0 ^ c3 ^ k1;
            c3 = lo0;
            k0 += 0x9E3779B97F4A7C15ULL;
            k1 += 0xBB67AE8584CAA73BULL;
        }
        out[0] = c0; out[1] = c1; out[2] = c2; out[3] = c3;
    }
    """
    void rbm_philox(uint64_t c0, uint64_t c1, uint64_t c2, uint64_t c3,
                    uint64_t k0, uint64_t k1, uint64_t *out) nogil

cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.1102230246251565e-16
cdef double DIVERGENCE = 1e10


cdef inline double _u53(uint64_t x) noexcept nogil:
    return <double>(x >> 11) * INV_2_53


cdef inline void _block(uint64_t k0, uint64_t k1, uint64_t lane, uint64_t step,
                        uint64_t block, uint64_t *out) noexcept nogil:
    # first block uses word0 = 1, as numpy's Philox increments before encrypting
    rbm_philox(block + 1, lane, step, 0, k0, k1, out)


cdef inline void _gauss4(uint64_t *w, double *z) noexcept nogil:
    cdef double r, th
    r = sqrt(-2.0 * log(_u53(w[0]) + INV_2_53))
    th = TWO_PI * _u53(w[1])
    z[0] = r * cos(th)
    z[1] = r * sin(th)
    r = sqrt(-2.0 * log(_u53(w[2]) + INV_2_53))
    th = TWO_PI * _u53(w[3])
    z[2] = r * cos(th)
    z[3] = r * sin(th)


def raw(uint64_t k0, uint64_t k1, uint64_t lane, uint64_t step, uint64_t offset, Py_ssize_t n):
    cdef Py_ssize_t nb = (n + 3) // 4, b, m
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(nb * 4, dtype=np.uint64)
    cdef uint64_t w[4]
    with nogil:
        for b in range(nb):
            _block(k0, k1, lane, step, offset + b, w)
            for m in range(4):
                out[4 * b + m] = w[m]
    return out[:n]


def uniform(uint64_t k0, uint64_t k1, uint64_t lane, uint64_t step, uint64_t offset, Py_ssize_t n):
    cdef Py_ssize_t nb = (n + 3) // 4, b, m
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(nb * 4, dtype=np.float64)
    cdef uint64_t w[4]
    with nogil:
        for b in range(nb):
            _block(k0, k1, lane, step, offset + b, w)
            for m in range(4):
                out[4 * b + m] = _u53(w[m])
    return out[:n]


def normal(uint64_t k0, uint64_t k1, uint64_t lane, uint64_t step, uint64_t offset, Py_ssize_t n):
    cdef Py_ssize_t nb = (n + 3) // 4, b, m
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(nb * 4, dtype=np.float64)
    cdef uint64_t w[4]
    cdef double z[4]
    with nogil:
        for b in range(nb):
            _block(k0, k1, lane, step, offset + b, w)
            _gauss4(w, z)
            for m in range(4):
                out[4 * b + m] = z[m]
    return out[:n]


def noise_block(uint64_t k0, uint64_t k1, uint64_t step, Py_ssize_t n_particles, Py_ssize_t dim):
    """Row i holds the first `dim` normals of particle i's stream at `step`."""
    cdef Py_ssize_t nb = (dim + 3) // 4, i, b, m, col
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_particles, dim), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef uint64_t w[4]
    cdef double z[4]
    cdef double r, th
    with nogil:
        for i in range(n_particles):
            col = 0
            for b in range(nb):
                _block(k0, k1, <uint64_t>i, step, <uint64_t>b, w)
                # only the normals actually used are transformed
                for m in range(0, 4, 2):
                    if col >= dim:
                        break
                    r = sqrt(-2.0 * log(_u53(w[m]) + INV_2_53))
                    th = TWO_PI * _u53(w[m + 1])
                    o[i, col] = r * cos(th)
                    col += 1
                    if col < dim:
                        o[i, col] = r * sin(th)
                        col += 1
    return out


def shuffle_partition(uint64_t k0, uint64_t k1, uint64_t lane, uint64_t step,
                      Py_ssize_t n_particles, Py_ssize_t p):
    """Fisher-Yates shuffle chunked into batches; members sorted within each batch."""
    cdef Py_ssize_t n = n_particles, i, j, m, b, nbatch = n_particles // p
    cdef cnp.ndarray[cnp.int64_t, ndim=1] perm_arr = np.arange(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] assign_arr = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] members_arr = np.empty((nbatch, p), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] fill_arr = np.zeros(nbatch, dtype=np.int64)
    cdef int64_t[::1] perm = perm_arr
    cdef int64_t[::1] assign = assign_arr
    cdef int64_t[:, ::1] members = members_arr
    cdef int64_t[::1] fill = fill_arr
    cdef int64_t tmp
    cdef uint64_t w[4]
    with nogil:
        # draw m (0-based) is consumed by position i = n - 1 - m
        for m in range(n - 1):
            if m % 4 == 0:
                _block(k0, k1, lane, step, <uint64_t>(m // 4), w)
            i = n - 1 - m
            j = <Py_ssize_t>(_u53(w[m % 4]) * <double>(i + 1))
            if j > i:
                j = i
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
        for m in range(n):
            assign[perm[m]] = m // p
        for i in range(n):
            b = assign[i]
            members[b, fill[b]] = i
            fill[b] += 1
    return assign_arr, members_arr


def batch_forces(const double[:, ::1] x, const int64_t[:, ::1] members, int kernel_code, double kappa):
    """Mean interaction over batch-mates, summed in ascending index order."""
    cdef Py_ssize_t nbatch = members.shape[0], p = members.shape[1], d = x.shape[1]
    cdef Py_ssize_t b, a, c, k
    cdef int64_t i, j
    cdef double diff, r2, scale
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((x.shape[0], d), dtype=np.float64)
    cdef double[:, ::1] f = out
    if kernel_code == 0:
        return out
    with nogil:
        for b in range(nbatch):
            for a in range(p):
                i = members[b, a]
                for c in range(p):
                    if c == a:
                        continue
                    j = members[b, c]
                    if kernel_code == 1:
                        for k in range(d):
                            f[i, k] += -kappa * (x[i, k] - x[j, k])
                    else:
                        r2 = 0.0
                        for k in range(d):
                            diff = x[i, k] - x[j, k]
                            r2 += diff * diff
                        scale = kappa / (1.0 + r2)
                        for k in range(d):
                            f[i, k] += scale * (x[i, k] - x[j, k])
                for k in range(d):
                    f[i, k] = f[i, k] / <double>(p - 1)
    return out


def em_update(const double[:, ::1] x, const double[:, ::1] drift, const double[:, ::1] force,
              const double[:, ::1] noise, double tau, double noise_scale):
    """x + tau*b + tau*F + scale*z; returns (new positions, first bad row or -1)."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, k, bad = -1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double v
    with nogil:
        for i in range(n):
            for k in range(d):
                v = x[i, k] + tau * drift[i, k] + tau * force[i, k] + noise_scale * noise[i, k]
                o[i, k] = v
                if bad < 0 and (not isfinite(v) or fabs(v) > DIVERGENCE):
                    bad = i
    return out, bad


def linear_drift_update(const double[:, ::1] x, double a, const double[:, ::1] force,
                        const double[:, ::1] noise, double tau, double noise_scale):
    """Fused update for b(x) = -a x."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, k, bad = -1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double v, na = -a
    with nogil:
        for i in range(n):
            for k in range(d):
                v = x[i, k] + tau * (na * x[i, k]) + tau * force[i, k] + noise_scale * noise[i, k]
                o[i, k] = v
                if bad < 0 and (not isfinite(v) or fabs(v) > DIVERGENCE):
                    bad = i
    return out, bad
