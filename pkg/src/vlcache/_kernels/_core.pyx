# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: tiled attention statistics and one decode step.

Same tiling schedule and precision contract as the numpy fallback:
float32 exponentials, float64 accumulation, float64 dot products for the
statistics passes. The decode step stays in float32 end to end.

Query and key tiles are widened to float64 once per tile into scratch
buffers, so the dot-product inner loops run on contiguous doubles and
the compiler can keep them in packed FMA form; converting inside the dot
would cost two scalar widens per multiply and block vectorization.
"""

from libc.float cimport FLT_MAX
from libc.math cimport exp, expf, sqrt
from libc.stdint cimport int64_t
from libc.stdlib cimport free, malloc

import numpy as np

# The dot products live in verbatim C: with restrict-qualified pointers
# and plain for-loops the compiler packs the four (eight) independent
# accumulator chains into SIMD FMAs, which it refuses to do for the
# equivalent Cython while-loops. The lane-per-accumulator packing keeps
# the written association, so results are bit-identical to the scalar
# chains.
cdef extern from *:
    """
    #include <stddef.h>

    /* 16 f64 chains = four 4-lane FMA streams deep enough to hide the
       FMA latency; head dims are multiples of 8, so the remainder loop
       is cold. */
    static inline double vl_dot64(const double * restrict a,
                                  const double * restrict b, ptrdiff_t d) {
        double s00 = 0.0, s01 = 0.0, s02 = 0.0, s03 = 0.0;
        double s04 = 0.0, s05 = 0.0, s06 = 0.0, s07 = 0.0;
        double s08 = 0.0, s09 = 0.0, s10 = 0.0, s11 = 0.0;
        double s12 = 0.0, s13 = 0.0, s14 = 0.0, s15 = 0.0;
        ptrdiff_t t = 0;
        for (; t + 16 <= d; t += 16) {
            s00 += a[t] * b[t];
            s01 += a[t + 1] * b[t + 1];
            s02 += a[t + 2] * b[t + 2];
            s03 += a[t + 3] * b[t + 3];
            s04 += a[t + 4] * b[t + 4];
            s05 += a[t + 5] * b[t + 5];
            s06 += a[t + 6] * b[t + 6];
            s07 += a[t + 7] * b[t + 7];
            s08 += a[t + 8] * b[t + 8];
            s09 += a[t + 9] * b[t + 9];
            s10 += a[t + 10] * b[t + 10];
            s11 += a[t + 11] * b[t + 11];
            s12 += a[t + 12] * b[t + 12];
            s13 += a[t + 13] * b[t + 13];
            s14 += a[t + 14] * b[t + 14];
            s15 += a[t + 15] * b[t + 15];
        }
        for (; t < d; ++t) s00 += a[t] * b[t];
        return (((s00 + s01) + (s02 + s03)) + ((s04 + s05) + (s06 + s07)))
             + (((s08 + s09) + (s10 + s11)) + ((s12 + s13) + (s14 + s15)));
    }

    static inline float vl_dot32(const float * restrict a,
                                 const float * restrict b, ptrdiff_t d) {
        float s00 = 0.0f, s01 = 0.0f, s02 = 0.0f, s03 = 0.0f;
        float s04 = 0.0f, s05 = 0.0f, s06 = 0.0f, s07 = 0.0f;
        float s08 = 0.0f, s09 = 0.0f, s10 = 0.0f, s11 = 0.0f;
        float s12 = 0.0f, s13 = 0.0f, s14 = 0.0f, s15 = 0.0f;
        ptrdiff_t t = 0;
        for (; t + 16 <= d; t += 16) {
            s00 += a[t] * b[t];
            s01 += a[t + 1] * b[t + 1];
            s02 += a[t + 2] * b[t + 2];
            s03 += a[t + 3] * b[t + 3];
            s04 += a[t + 4] * b[t + 4];
            s05 += a[t + 5] * b[t + 5];
            s06 += a[t + 6] * b[t + 6];
            s07 += a[t + 7] * b[t + 7];
            s08 += a[t + 8] * b[t + 8];
            s09 += a[t + 9] * b[t + 9];
            s10 += a[t + 10] * b[t + 10];
            s11 += a[t + 11] * b[t + 11];
            s12 += a[t + 12] * b[t + 12];
            s13 += a[t + 13] * b[t + 13];
            s14 += a[t + 14] * b[t + 14];
            s15 += a[t + 15] * b[t + 15];
        }
        for (; t < d; ++t) s00 += a[t] * b[t];
        return (((s00 + s01) + (s02 + s03)) + ((s04 + s05) + (s06 + s07)))
             + (((s08 + s09) + (s10 + s11)) + ((s12 + s13) + (s14 + s15)));
    }

    static inline void vl_widen(const float * restrict src,
                                double * restrict dst, ptrdiff_t count) {
        for (ptrdiff_t i = 0; i < count; ++i) dst[i] = (double) src[i];
    }
    """
    double vl_dot64(const double *a, const double *b, Py_ssize_t d) noexcept nogil
    float vl_dot32(const float *a, const float *b, Py_ssize_t d) noexcept nogil
    void vl_widen(const float *src, double *dst, Py_ssize_t count) noexcept nogil


cdef inline void _widen_rows(const float[:, ::1] src, Py_ssize_t r0, Py_ssize_t r1,
                             double *dst, Py_ssize_t d) noexcept nogil:
    if r1 > r0:
        vl_widen(&src[r0, 0], dst, (r1 - r0) * d)


cdef void _pass1(const float[:, ::1] q, const float[:, ::1] keys,
                 Py_ssize_t q_base, Py_ssize_t tile,
                 float[::1] row_max, double[::1] row_sum,
                 float *lbuf, double *qbuf, double *kbuf) noexcept nogil:
    cdef Py_ssize_t w = q.shape[0], d = q.shape[1], n = keys.shape[0]
    cdef Py_ssize_t q0, q1, k0, k1, r, j, jmax
    cdef double acc, tile_sum
    cdef double inv = 1.0 / sqrt(<double> d)
    cdef const double *qrow
    cdef float l32, lmax

    q0 = 0
    while q0 < w:
        q1 = q0 + tile
        if q1 > w:
            q1 = w
        _widen_rows(q, q0, q1, qbuf, d)
        k0 = 0
        while k0 < n:
            if k0 > q_base + q1 - 1:
                break
            k1 = k0 + tile
            if k1 > n:
                k1 = n
            _widen_rows(keys, k0, k1, kbuf, d)
            for r in range(q0, q1):
                jmax = q_base + r + 1
                if jmax > k1:
                    jmax = k1
                if k0 >= jmax:
                    continue
                qrow = qbuf + (r - q0) * d
                lmax = -FLT_MAX
                for j in range(k0, jmax):
                    acc = vl_dot64(qrow, kbuf + (j - k0) * d, d)
                    l32 = <float> (acc * inv)
                    lbuf[j - k0] = l32
                    if l32 > lmax:
                        lmax = l32
                if lmax > row_max[r]:
                    row_sum[r] *= exp(<double> row_max[r] - <double> lmax)
                    row_max[r] = lmax
                tile_sum = 0.0
                for j in range(k0, jmax):
                    tile_sum += <double> expf(lbuf[j - k0] - row_max[r])
                row_sum[r] += tile_sum
            k0 += tile
        q0 += tile


cdef void _pass2(const float[:, ::1] q, const float[:, ::1] keys,
                 Py_ssize_t q_base, double p, Py_ssize_t tile,
                 const float[::1] row_max, const double[::1] row_sum,
                 double[::1] col_score, int64_t[::1] below,
                 int64_t[::1] causal,
                 float *lbuf, double *qbuf, double *kbuf) noexcept nogil:
    cdef Py_ssize_t w = q.shape[0], d = q.shape[1], n = keys.shape[0]
    cdef Py_ssize_t q0, q1, k0, k1, r, j, jmax
    cdef double inv_sum
    cdef double inv = 1.0 / sqrt(<double> d)
    cdef const double *qrow
    cdef float rmax
    cdef float e

    k0 = 0
    while k0 < n:
        k1 = k0 + tile
        if k1 > n:
            k1 = n
        _widen_rows(keys, k0, k1, kbuf, d)
        q0 = 0
        while q0 < w:
            q1 = q0 + tile
            if q1 > w:
                q1 = w
            if k0 > q_base + q1 - 1:
                q0 += tile
                continue
            _widen_rows(q, q0, q1, qbuf, d)
            for r in range(q0, q1):
                jmax = q_base + r + 1
                if jmax > k1:
                    jmax = k1
                qrow = qbuf + (r - q0) * d
                # dots first so the FMA loop stays register-resident,
                # then the expf calls over the buffered logits
                for j in range(k0, jmax):
                    lbuf[j - k0] = <float> (vl_dot64(qrow, kbuf + (j - k0) * d, d) * inv)
                rmax = row_max[r]
                inv_sum = 1.0 / row_sum[r]
                for j in range(k0, jmax):
                    e = expf(lbuf[j - k0] - rmax)
                    col_score[j] += <double> e * inv_sum
                    if <double> e < p:
                        below[j] += 1
                    causal[j] += 1
            q0 += tile
        k0 += tile


def stats_tiled(const float[:, ::1] q, const float[:, ::1] keys,
                Py_ssize_t q_base, double p, Py_ssize_t tile):
    """Tiled attention statistics; see the numpy twin for the contract."""
    cdef Py_ssize_t w = q.shape[0], n = keys.shape[0], d = q.shape[1]
    row_max_arr = np.full(w, np.float32(-np.inf), dtype=np.float32)
    row_sum_arr = np.zeros(w, dtype=np.float64)
    col_score_arr = np.zeros(n, dtype=np.float64)
    below_arr = np.zeros(n, dtype=np.int64)
    causal_arr = np.zeros(n, dtype=np.int64)

    cdef float[::1] row_max = row_max_arr
    cdef double[::1] row_sum = row_sum_arr
    cdef double[::1] col_score = col_score_arr
    cdef int64_t[::1] below = below_arr
    cdef int64_t[::1] causal = causal_arr
    cdef float *lbuf = <float *> malloc(tile * sizeof(float))
    cdef double *qbuf = <double *> malloc(tile * d * sizeof(double))
    cdef double *kbuf = <double *> malloc(tile * d * sizeof(double))
    if lbuf == NULL or qbuf == NULL or kbuf == NULL:
        free(lbuf)
        free(qbuf)
        free(kbuf)
        raise MemoryError()
    try:
        with nogil:
            _pass1(q, keys, q_base, tile, row_max, row_sum, lbuf, qbuf, kbuf)
            _pass2(q, keys, q_base, p, tile, row_max, row_sum,
                   col_score, below, causal, lbuf, qbuf, kbuf)
    finally:
        free(lbuf)
        free(qbuf)
        free(kbuf)
    return row_max_arr, row_sum_arr, col_score_arr, below_arr, causal_arr


def decode_step(const float[:, ::1] q, const float[:, ::1] keys,
                const float[:, ::1] values):
    """One decode attention pass: q [G, d] against keys/values [n, d]."""
    cdef Py_ssize_t g_n = q.shape[0], d = q.shape[1], n = keys.shape[0]
    out_arr = np.zeros((g_n, d), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef float *ebuf = <float *> malloc(n * sizeof(float))
    if ebuf == NULL:
        raise MemoryError()
    cdef Py_ssize_t g, j, t
    cdef float acc, lmax, e, wj
    cdef double ssum
    cdef float inv = <float> (1.0 / sqrt(<double> d))
    try:
        with nogil:
            for g in range(g_n):
                lmax = -FLT_MAX
                for j in range(n):
                    acc = vl_dot32(&q[g, 0], &keys[j, 0], d) * inv
                    ebuf[j] = acc
                    if acc > lmax:
                        lmax = acc
                ssum = 0.0
                for j in range(n):
                    e = expf(ebuf[j] - lmax)
                    ebuf[j] = e
                    ssum += <double> e
                for j in range(n):
                    wj = <float> (<double> ebuf[j] / ssum)
                    for t in range(d):
                        out[g, t] += wj * values[j, t]
    finally:
        free(ebuf)
    return out_arr
