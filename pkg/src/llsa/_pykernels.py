"""Pure-Python (numpy) kernels; same signatures as the compiled ``_kernels`` module.

Used when the extension is not built or when ``LLSA_PURE_PYTHON=1``.
Arithmetic is carried out in float64 and cast back to the input precision.
"""

import numpy as np

_num_threads = 1


def set_num_threads(n):
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads():
    return _num_threads


def pool_mean(x, B, out=None):
    n, d = x.shape[0] // B, x.shape[1]
    acc = np.zeros((n, d), dtype=np.float64)
    for b in range(B):
        acc += x[b::B]
    acc /= B
    if out is None:
        return acc.astype(x.dtype)
    out[...] = acc
    return out


def _insert_topk(scores, cand, K):
    # stable sort on -score keeps the smaller global index first among ties
    order = np.argsort(-scores, kind="stable")[:K]
    return np.sort(cand[order])


def topk_full(q, k, K, scale):
    s = (q.astype(np.float64) @ k.astype(np.float64).T) * scale
    cand = np.arange(k.shape[0], dtype=np.int32)
    out = np.empty((q.shape[0], K), dtype=np.int32)
    for r in range(q.shape[0]):
        out[r] = _insert_topk(s[r], cand, K)
    return out


def topk_gather(q, k, parent, K, B, scale):
    q = q.astype(np.float64)
    k = k.astype(np.float64)
    out = np.empty((q.shape[0], K), dtype=np.int32)
    offs = np.arange(B, dtype=np.int32)
    for i in range(parent.shape[0]):
        cand = (parent[i][:, None] * B + offs).ravel()
        s = (q[i * B:(i + 1) * B] @ k[cand].T) * scale
        for r in range(B):
            out[i * B + r] = _insert_topk(s[r], cand, K)
    return out


def transpose(idx, n_key_blocks, n_chunks=1):
    T, K = idx.shape
    counts = np.bincount(idx.ravel(), minlength=n_key_blocks)
    offsets = np.zeros(n_key_blocks + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    cursor = offsets[:-1].copy()
    flat = np.empty(T * K, dtype=np.int32)
    for i in range(T):
        for j in range(K):
            b = idx[i, j]
            flat[cursor[b]] = i
            cursor[b] += 1
    return flat, offsets


def build_mask(idx, n_key_blocks):
    mask = np.zeros((idx.shape[0], n_key_blocks), dtype=np.uint8)
    rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
    mask[rows, idx.ravel()] = 1
    return mask


def _gather_rows(entry_base, blocks, B):
    return ((entry_base + blocks * B)[:, None] + np.arange(B)).ravel()


def attn_forward(q, kk, vv, entry_base, entry_blocks, escale, ebias, evw, B, safe=True):
    N, d = q.shape
    sc = np.repeat(escale, B)
    bias = np.repeat(ebias, B)
    vw = np.repeat(evw, B)
    out = np.empty((N, d), dtype=q.dtype)
    row_max = np.zeros(N)
    row_den = np.empty(N)
    for i in range(N // B):
        rows = _gather_rows(entry_base, entry_blocks[i], B)
        qi = q[i * B:(i + 1) * B].astype(np.float64)
        s = (qi @ kk[rows].astype(np.float64).T) * sc + bias
        m = s.max(axis=1) if safe else np.zeros(B)
        p = np.exp(s - m[:, None])
        den = p.sum(axis=1)
        out[i * B:(i + 1) * B] = ((p * vw) @ vv[rows].astype(np.float64)) / den[:, None]
        row_max[i * B:(i + 1) * B] = m
        row_den[i * B:(i + 1) * B] = den
    return out, row_max, row_den


def attn_backward_dq(q, kk, vv, dO, row_max, row_den, D, entry_base, entry_blocks,
                     escale, ebias, evw, B):
    N, d = q.shape
    sc = np.repeat(escale, B)
    bias = np.repeat(ebias, B)
    vw = np.repeat(evw, B)
    dq = np.empty((N, d), dtype=q.dtype)
    for i in range(N // B):
        sl = slice(i * B, (i + 1) * B)
        rows = _gather_rows(entry_base, entry_blocks[i], B)
        kc = kk[rows].astype(np.float64)
        s = (q[sl].astype(np.float64) @ kc.T) * sc + bias
        p = np.exp(s - row_max[sl, None]) / row_den[sl, None]
        dp = (dO[sl].astype(np.float64) @ vv[rows].astype(np.float64).T) * vw
        ds = p * (dp - D[sl, None])
        dq[sl] = (ds * sc) @ kc
    return dq


def _kv_block(q, dO, row_max, row_den, D, kl, vl, b, qblocks, fan, scale, bias, vw, B,
              dk, dv):
    fine = (qblocks[:, None] * fan + np.arange(fan)).ravel()
    t = (fine[:, None] * B + np.arange(B)).ravel()
    if t.size == 0:
        return
    qs = q[t].astype(np.float64)
    dos = dO[t].astype(np.float64)
    kb = kl[b * B:(b + 1) * B].astype(np.float64)
    vb = vl[b * B:(b + 1) * B].astype(np.float64)
    p = np.exp(qs @ kb.T * scale + bias - row_max[t, None]) / row_den[t, None]
    dv[b * B:(b + 1) * B] = vw * (p.T @ dos)
    ds = p * (vw * (dos @ vb.T) - D[t, None])
    dk[b * B:(b + 1) * B] = scale * (ds.T @ qs)


def kv_backward_csc(q, dO, row_max, row_den, D, kl, vl, flat, offsets, fan,
                    scale, bias, vw, B):
    dk = np.zeros(kl.shape, dtype=kl.dtype)
    dv = np.zeros(vl.shape, dtype=vl.dtype)
    for b in range(offsets.shape[0] - 1):
        qblocks = flat[offsets[b]:offsets[b + 1]].astype(np.int64)
        _kv_block(q, dO, row_max, row_den, D, kl, vl, b, qblocks, fan, scale, bias, vw,
                  B, dk, dv)
    return dk, dv


def kv_backward_mask(q, dO, row_max, row_den, D, kl, vl, mask, fan, scale, bias, vw, B):
    dk = np.zeros(kl.shape, dtype=kl.dtype)
    dv = np.zeros(vl.shape, dtype=vl.dtype)
    for b in range(mask.shape[1]):
        qblocks = np.flatnonzero(mask[:, b])
        _kv_block(q, dO, row_max, row_den, D, kl, vl, b, qblocks, fan, scale, bias, vw,
                  B, dk, dv)
    return dk, dv
