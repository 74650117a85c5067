# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: pooling, Top-K scans, index transposition, attention passes.

Each function mirrors the one of the same name in ``_pykernels``. Work is split
across OpenMP threads by output row or output block so that every output
element has exactly one writer; accumulation order inside a row is fixed, which
keeps results bitwise identical for any thread count.
"""

import numpy as np

from cython.parallel cimport parallel, prange
from libc.math cimport INFINITY
from libc.stdlib cimport free, malloc

cdef extern from "_simd.h" nogil:
    double exp(double x)

ctypedef fused real:
    float
    double

cdef int _num_threads = 1


def set_num_threads(int n):
    global _num_threads
    _num_threads = n if n > 0 else 1


def get_num_threads():
    return _num_threads


cdef inline double _dot(const real* a, const real* b, Py_ssize_t d) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t c
    for c in range(d):
        acc = acc + <double>a[c] * <double>b[c]
    return acc


def pool_mean(real[:, ::1] x, Py_ssize_t B, out=None):
    cdef Py_ssize_t n = x.shape[0] // B
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t t, c, b
    cdef double acc
    if out is None:
        out = np.empty((n, d), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] o = out
    for t in prange(n, nogil=True, num_threads=_num_threads, schedule="static"):
        for c in range(d):
            acc = 0.0
            for b in range(B):
                acc = acc + x[t * B + b, c]
            o[t, c] = <real>(acc / B)
    return out


# Top-K buffer ordered by (score desc, index asc). Candidates arrive in ascending
# index order, so a tie never displaces an earlier entry.
cdef inline void _topk_push(double* bs, int* bi, int* cnt, int K, double s,
                            int idx) noexcept nogil:
    cdef int p = cnt[0]
    if p == K:
        if not (s > bs[K - 1]):
            return
        p = K - 1
    else:
        cnt[0] = p + 1
    while p > 0 and bs[p - 1] < s:
        bs[p] = bs[p - 1]
        bi[p] = bi[p - 1]
        p -= 1
    bs[p] = s
    bi[p] = idx


cdef inline void _sort_small(int* a, int n) noexcept nogil:
    cdef int i, j, v
    for i in range(1, n):
        v = a[i]
        j = i - 1
        while j >= 0 and a[j] > v:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = v


def topk_full(real[:, ::1] q, real[:, ::1] k, int K, double scale):
    cdef Py_ssize_t R = q.shape[0], C = k.shape[0], d = q.shape[1]
    cdef Py_ssize_t r, c
    cdef int j, cnt
    cdef double* bs
    cdef int* bi
    out = np.empty((R, K), dtype=np.int32)
    cdef int[:, ::1] o = out
    with nogil, parallel(num_threads=_num_threads):
        bs = <double*> malloc(K * sizeof(double))
        bi = <int*> malloc(K * sizeof(int))
        for r in prange(R, schedule="static"):
            cnt = 0
            for c in range(C):
                _topk_push(bs, bi, &cnt, K, scale * _dot(&q[r, 0], &k[c, 0], d), <int>c)
            _sort_small(bi, K)
            for j in range(K):
                o[r, j] = bi[j]
        free(bs)
        free(bi)
    return out


def topk_gather(real[:, ::1] q, real[:, ::1] k, int[:, ::1] parent, int K, int B,
                double scale):
    cdef Py_ssize_t T = parent.shape[0], P = parent.shape[1], d = q.shape[1]
    cdef Py_ssize_t i, r, p, b, row, tok
    cdef int j, cnt
    cdef double* bs
    cdef int* bi
    out = np.empty((T * B, K), dtype=np.int32)
    cdef int[:, ::1] o = out
    with nogil, parallel(num_threads=_num_threads):
        bs = <double*> malloc(K * sizeof(double))
        bi = <int*> malloc(K * sizeof(int))
        for i in prange(T, schedule="static"):
            for r in range(B):
                row = i * B + r
                cnt = 0
                for p in range(P):
                    for b in range(B):
                        tok = <Py_ssize_t>parent[i, p] * B + b
                        _topk_push(bs, bi, &cnt, K,
                                   scale * _dot(&q[row, 0], &k[tok, 0], d), <int>tok)
                _sort_small(bi, K)
                for j in range(K):
                    o[row, j] = bi[j]
        free(bs)
        free(bi)
    return out


def transpose(int[:, ::1] idx, Py_ssize_t n_key_blocks, int n_chunks=0):
    """Two-pass counting transpose (CSR -> CSC) with per-chunk counters.

    Rows are split into contiguous chunks; each chunk counts and scatters into
    its own precomputed cursor range, so segments come out sorted by row.
    """
    cdef Py_ssize_t T = idx.shape[0], K = idx.shape[1]
    cdef Py_ssize_t c, i, j, b, lo, hi, run
    if n_chunks <= 0:
        n_chunks = _num_threads
    if n_chunks > T:
        n_chunks = <int>max(T, 1)
    counts_arr = np.zeros((n_chunks, n_key_blocks), dtype=np.intp)
    offsets_arr = np.zeros(n_key_blocks + 1, dtype=np.intp)
    flat_arr = np.empty(T * K, dtype=np.int32)
    cdef Py_ssize_t[:, ::1] cnt = counts_arr
    cdef Py_ssize_t[::1] off = offsets_arr
    cdef int[::1] flat = flat_arr
    cdef Py_ssize_t nc = n_chunks

    for c in prange(nc, nogil=True, num_threads=_num_threads, schedule="static"):
        for i in range(c * T // nc, (c + 1) * T // nc):
            for j in range(K):
                cnt[c, idx[i, j]] += 1

    # prefix sum; turn per-chunk counts into per-chunk write cursors
    for b in range(n_key_blocks):
        run = off[b]
        for c in range(nc):
            lo = cnt[c, b]
            cnt[c, b] = run
            run = run + lo
        off[b + 1] = run

    for c in prange(nc, nogil=True, num_threads=_num_threads, schedule="static"):
        for i in range(c * T // nc, (c + 1) * T // nc):
            for j in range(K):
                b = idx[i, j]
                hi = cnt[c, b]
                flat[hi] = <int>i
                cnt[c, b] = hi + 1
    return flat_arr, offsets_arr


def build_mask(int[:, ::1] idx, Py_ssize_t n_key_blocks):
    cdef Py_ssize_t T = idx.shape[0], K = idx.shape[1], i, j
    mask_arr = np.zeros((T, n_key_blocks), dtype=np.uint8)
    cdef unsigned char[:, ::1] mask = mask_arr
    for i in range(T):
        for j in range(K):
            mask[i, idx[i, j]] = 1
    return mask_arr


# Attention kernels work on B x B tiles. A key (or value) block is first copied
# transposed into a d x B scratch tile so that the score loop runs over B
# contiguous keys; every score is still summed over features in order c = 0..d-1.

cdef inline void _load_t(const real* rows, Py_ssize_t B, Py_ssize_t d,
                         double* tile) noexcept nogil:
    cdef Py_ssize_t j, c
    for j in range(B):
        for c in range(d):
            tile[c * B + j] = rows[j * d + c]


cdef inline void _scores(const real* x, const double* tile, Py_ssize_t B, Py_ssize_t d,
                         double* s) noexcept nogil:
    # s[j] = sum_c x[c] * tile[c, j]
    cdef Py_ssize_t j, c
    cdef double xc
    cdef const double* tc
    for j in range(B):
        s[j] = 0.0
    for c in range(d):
        xc = x[c]
        tc = tile + c * B
        for j in range(B):
            s[j] = s[j] + xc * tc[j]


cdef inline void _probs(double* s, double* dp, double sc, double bias, double vw, double m,
                        double den, double Dt, Py_ssize_t B) noexcept nogil:
    # in place: s[j] <- softmax probability, dp[j] <- logit gradient ds
    cdef Py_ssize_t j
    for j in range(B):
        s[j] = exp(sc * s[j] + bias - m) / den
    for j in range(B):
        dp[j] = s[j] * (vw * dp[j] - Dt) * sc


cdef void _forward_block(const real* q, const real* kk, const real* vv, Py_ssize_t d,
                         const int* base, const int* blocks, const double* esc,
                         const double* eb, const double* evw, Py_ssize_t E, int B,
                         bint safe, double* kt, double* s, double* acc, double* m,
                         double* den, real* out, double* m_out, double* den_out) noexcept nogil:
    cdef Py_ssize_t e, r, j, c, row0
    cdef double mx, alpha, p
    cdef double* sr
    cdef double* ar
    cdef const real* vrow
    for r in range(B):
        m[r] = -INFINITY if safe else 0.0
        den[r] = 0.0
    for c in range(B * d):
        acc[c] = 0.0
    for e in range(E):
        row0 = base[e] + <Py_ssize_t>blocks[e] * B
        _load_t(kk + row0 * d, B, d, kt)
        for r in range(B):
            sr = s + r * B
            ar = acc + r * d
            _scores(q + r * d, kt, B, d, sr)
            mx = -INFINITY
            for j in range(B):
                sr[j] = esc[e] * sr[j] + eb[e]
                if sr[j] > mx:
                    mx = sr[j]
            if safe and mx > m[r]:
                alpha = exp(m[r] - mx)
                den[r] = den[r] * alpha
                for c in range(d):
                    ar[c] = ar[c] * alpha
                m[r] = mx
            mx = m[r]
            for j in range(B):
                sr[j] = exp(sr[j] - mx)
            for j in range(B):
                den[r] = den[r] + sr[j]
                p = sr[j] * evw[e]
                vrow = vv + (row0 + j) * d
                for c in range(d):
                    ar[c] = ar[c] + p * vrow[c]
    for r in range(B):
        for c in range(d):
            out[r * d + c] = <real>(acc[r * d + c] / den[r])
        m_out[r] = m[r]
        den_out[r] = den[r]


def attn_forward(real[:, ::1] q, real[:, ::1] kk, real[:, ::1] vv, int[::1] entry_base,
                 int[:, ::1] entry_blocks, double[::1] escale, double[::1] ebias,
                 double[::1] evw, int B, bint safe=True):
    cdef Py_ssize_t N = q.shape[0], d = q.shape[1], E = entry_base.shape[0]
    cdef Py_ssize_t T = N // B, i
    cdef double* buf
    out = np.empty((N, d), dtype=np.asarray(q).dtype)
    row_max = np.empty(N)
    row_den = np.empty(N)
    cdef real[:, ::1] o = out
    cdef double[::1] m = row_max
    cdef double[::1] den = row_den
    with nogil, parallel(num_threads=_num_threads):
        buf = <double*> malloc((2 * B * d + B * B + 2 * B) * sizeof(double))
        for i in prange(T, schedule="static"):
            _forward_block(&q[i * B, 0], &kk[0, 0], &vv[0, 0], d, &entry_base[0],
                           &entry_blocks[i, 0], &escale[0], &ebias[0], &evw[0], E, B, safe,
                           buf, buf + B * d, buf + B * d + B * B,
                           buf + 2 * B * d + B * B, buf + 2 * B * d + B * B + B,
                           &o[i * B, 0], &m[i * B], &den[i * B])
        free(buf)
    return out, row_max, row_den


cdef void _dq_block(const real* q, const real* kk, const real* vv, const real* dO,
                    const double* m, const double* den, const double* D, Py_ssize_t d,
                    const int* base, const int* blocks, const double* esc, const double* eb,
                    const double* evw, Py_ssize_t E, int B, double* kt, double* vt,
                    double* s, double* dp, double* acc, real* out) noexcept nogil:
    cdef Py_ssize_t e, r, j, c, row0
    cdef double ds
    cdef double* ar
    cdef const real* krow
    for c in range(B * d):
        acc[c] = 0.0
    for e in range(E):
        row0 = base[e] + <Py_ssize_t>blocks[e] * B
        _load_t(kk + row0 * d, B, d, kt)
        _load_t(vv + row0 * d, B, d, vt)
        for r in range(B):
            ar = acc + r * d
            _scores(q + r * d, kt, B, d, s)
            _scores(dO + r * d, vt, B, d, dp)
            _probs(s, dp, esc[e], eb[e], evw[e], m[r], den[r], D[r], B)
            for j in range(B):
                ds = dp[j]
                krow = kk + (row0 + j) * d
                for c in range(d):
                    ar[c] = ar[c] + ds * krow[c]
    for c in range(B * d):
        out[c] = <real>acc[c]


def attn_backward_dq(real[:, ::1] q, real[:, ::1] kk, real[:, ::1] vv, real[:, ::1] dO,
                     double[::1] row_max, double[::1] row_den, double[::1] D,
                     int[::1] entry_base, int[:, ::1] entry_blocks, double[::1] escale,
                     double[::1] ebias, double[::1] evw, int B):
    cdef Py_ssize_t N = q.shape[0], d = q.shape[1], E = entry_base.shape[0]
    cdef Py_ssize_t T = N // B, i
    cdef double* buf
    dq = np.empty((N, d), dtype=np.asarray(q).dtype)
    cdef real[:, ::1] o = dq
    with nogil, parallel(num_threads=_num_threads):
        buf = <double*> malloc((3 * B * d + 2 * B) * sizeof(double))
        for i in prange(T, schedule="static"):
            _dq_block(&q[i * B, 0], &kk[0, 0], &vv[0, 0], &dO[i * B, 0], &row_max[i * B],
                      &row_den[i * B], &D[i * B], d, &entry_base[0], &entry_blocks[i, 0],
                      &escale[0], &ebias[0], &evw[0], E, B, buf, buf + B * d,
                      buf + 2 * B * d, buf + 2 * B * d + B, buf + 2 * B * d + 2 * B,
                      &o[i * B, 0])
        free(buf)
    return dq


cdef void _kv_tokens(const real* q, const real* dO, const double* m, const double* den,
                     const double* D, Py_ssize_t t0, Py_ssize_t t1, const real* kb,
                     const double* kt, const double* vt, int B, Py_ssize_t d, double scale,
                     double bias, double vw, double* s, double* dp, double* ak,
                     double* av) noexcept nogil:
    # accumulate one key block's gradients over fine query tokens [t0, t1)
    cdef Py_ssize_t t, j, c
    cdef double ds, pw
    cdef const real* qt
    cdef const real* dot_
    cdef double* akj
    cdef double* avj
    for t in range(t0, t1):
        qt = q + t * d
        dot_ = dO + t * d
        _scores(qt, kt, B, d, s)
        _scores(dot_, vt, B, d, dp)
        _probs(s, dp, scale, bias, vw, m[t], den[t], D[t], B)
        for j in range(B):
            ds = dp[j]
            pw = s[j] * vw
            akj = ak + j * d
            avj = av + j * d
            for c in range(d):
                avj[c] = avj[c] + pw * dot_[c]
                akj[c] = akj[c] + ds * qt[c]


cdef inline double* _kv_scratch(Py_ssize_t B, Py_ssize_t d) noexcept nogil:
    # ak, av, kt, vt (B*d each) then s, dp (B each)
    return <double*> malloc((4 * B * d + 2 * B) * sizeof(double))


def kv_backward_csc(real[:, ::1] q, real[:, ::1] dO, double[::1] row_max,
                    double[::1] row_den, double[::1] D, real[:, ::1] kl, real[:, ::1] vl,
                    int[::1] flat, Py_ssize_t[::1] offsets, Py_ssize_t fan, double scale,
                    double bias, double vw, int B):
    cdef Py_ssize_t Tk = offsets.shape[0] - 1, d = q.shape[1]
    cdef Py_ssize_t b, x, c, span = fan * B, rho, bd = B * d
    cdef double* buf
    dk = np.empty_like(np.asarray(kl))
    dv = np.empty_like(np.asarray(vl))
    cdef real[:, ::1] dk_ = dk
    cdef real[:, ::1] dv_ = dv
    with nogil, parallel(num_threads=_num_threads):
        buf = _kv_scratch(B, d)
        for b in prange(Tk, schedule="dynamic"):
            for c in range(2 * bd):
                buf[c] = 0.0
            _load_t(&kl[b * B, 0], B, d, buf + 2 * bd)
            _load_t(&vl[b * B, 0], B, d, buf + 3 * bd)
            for x in range(offsets[b], offsets[b + 1]):
                rho = flat[x]
                _kv_tokens(&q[0, 0], &dO[0, 0], &row_max[0], &row_den[0], &D[0],
                           rho * span, (rho + 1) * span, &kl[b * B, 0], buf + 2 * bd,
                           buf + 3 * bd, B, d, scale, bias, vw, buf + 4 * bd,
                           buf + 4 * bd + B, buf, buf + bd)
            for c in range(bd):
                dk_[b * B + c // d, c % d] = <real>buf[c]
                dv_[b * B + c // d, c % d] = <real>buf[bd + c]
        free(buf)
    return dk, dv


def kv_backward_mask(real[:, ::1] q, real[:, ::1] dO, double[::1] row_max,
                     double[::1] row_den, double[::1] D, real[:, ::1] kl, real[:, ::1] vl,
                     unsigned char[:, ::1] mask, Py_ssize_t fan, double scale,
                     double bias, double vw, int B):
    """Baseline: key-major scan of a dense (query block x key block) mask column."""
    cdef Py_ssize_t Tq = mask.shape[0], Tk = mask.shape[1], d = q.shape[1]
    cdef Py_ssize_t b, rho, c, span = fan * B, bd = B * d
    cdef double* buf
    dk = np.empty_like(np.asarray(kl))
    dv = np.empty_like(np.asarray(vl))
    cdef real[:, ::1] dk_ = dk
    cdef real[:, ::1] dv_ = dv
    with nogil, parallel(num_threads=_num_threads):
        buf = _kv_scratch(B, d)
        for b in prange(Tk, schedule="dynamic"):
            for c in range(2 * bd):
                buf[c] = 0.0
            _load_t(&kl[b * B, 0], B, d, buf + 2 * bd)
            _load_t(&vl[b * B, 0], B, d, buf + 3 * bd)
            for rho in range(Tq):
                if mask[rho, b]:
                    _kv_tokens(&q[0, 0], &dO[0, 0], &row_max[0], &row_den[0], &D[0],
                               rho * span, (rho + 1) * span, &kl[b * B, 0], buf + 2 * bd,
                               buf + 3 * bd, B, d, scale, bias, vw, buf + 4 * bd,
                               buf + 4 * bd + B, buf, buf + bd)
            for c in range(bd):
                dk_[b * B + c // d, c % d] = <real>buf[c]
                dv_[b * B + c // d, c % d] = <real>buf[bd + c]
        free(buf)
    return dk, dv
