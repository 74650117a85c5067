"""Slow, independent references for the fast paths.

Everything here is written with plain numpy on dense or per-block matrices and
shares no kernels with the implementations it checks. The O(N^2) routines
refuse inputs above ``ORACLE_MAX_N`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import EnrichedKVPlan, build_plan, llsa_forward
from .core import (
    LevelIndices,
    ReweightMode,
    SelectionResult,
    get_precision,
    validate_config,
)
from .errors import IndexOutOfRange, OracleSizeError, PrecisionError, ShapeMismatch
from .grad import GradientSet, llsa_backward
from .indexmap import TransposedIndices, transpose_all
from .pyramid import Pyramid, build_pyramid
from .selection import hierarchical_topk

ORACLE_MAX_N = 2048


def _cap(n: int) -> None:
    if n > ORACLE_MAX_N:
        raise OracleSizeError(
            f"oracle called with N={n}; references are capped at N <= {ORACLE_MAX_N}"
        )


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    p = np.exp(s - s.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def dense_attention(q, k, v, scale: float) -> np.ndarray:
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatch("dense_attention expects 2-D matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    _cap(max(q.shape[0], k.shape[0]))
    return _softmax_rows(scale * (q @ k.T)) @ v


def dense_attention_backward(q, k, v, dO, scale: float) -> GradientSet:
    q, k, v, dO = (np.asarray(a, dtype=np.float64) for a in (q, k, v, dO))
    _cap(q.shape[0])
    p = _softmax_rows(scale * (q @ k.T))
    dp = dO @ v.T
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    return GradientSet(dq=scale * ds @ k, dk=scale * ds.T @ q, dv=p.T @ dO)


def _enriched_kv(entries, pyr_k: Pyramid, pyr_v: Pyramid, B: int, mode: ReweightMode):
    """Dense (keys, values, logit bias) for one query block."""
    ks, vs, bias = [], [], []
    for level, blk, w in entries:
        kb = np.asarray(pyr_k[level][blk * B:(blk + 1) * B], dtype=np.float64)
        vb = np.asarray(pyr_v[level][blk * B:(blk + 1) * B], dtype=np.float64)
        if mode is ReweightMode.SCALE_KV:
            ks.append(kb * w)
            vs.append(vb * w)
            bias += [0.0] * B
        else:
            ks.append(kb)
            vs.append(vb)
            bias += [math.log(w)] * B
    return np.vstack(ks), np.vstack(vs), np.asarray(bias)


def effective_attention(q, k, v, pyr_k: Pyramid, pyr_v: Pyramid, plan: EnrichedKVPlan, cfg) -> np.ndarray:
    """Ground truth for the forward pass: one dense softmax per query block."""
    cfg = validate_config(cfg)
    _cap(cfg.n)
    B = cfg.block_size
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (cfg.n, cfg.d):
        raise ShapeMismatch(f"q has shape {q.shape}")
    out = np.empty_like(q)
    for i in range(cfg.n_blocks):
        kc, vc, bias = _enriched_kv(plan.entries(i), pyr_k, pyr_v, B, cfg.reweight_mode)
        s = cfg.softmax_scale * (q[i * B:(i + 1) * B] @ kc.T) + bias
        out[i * B:(i + 1) * B] = _softmax_rows(s) @ vc
    return out


def mask_transpose(idx, n_key_blocks: int) -> TransposedIndices:
    """Reverse lookup by materialising the dense T x T_k boolean mask."""
    table = np.asarray(idx.indices if isinstance(idx, LevelIndices) else idx)
    if table.size and (table.min() < 0 or table.max() >= n_key_blocks):
        raise IndexOutOfRange(f"index outside [0, {n_key_blocks})")
    mask = np.zeros((table.shape[0], n_key_blocks), dtype=bool)
    for i, row in enumerate(table):
        for b in row:
            mask[i, b] = True
    cols = [np.flatnonzero(mask[:, b]) for b in range(n_key_blocks)]
    offsets = np.zeros(n_key_blocks + 1, dtype=np.intp)
    offsets[1:] = np.cumsum([len(c) for c in cols])
    flat = np.concatenate(cols).astype(np.int32) if cols else np.zeros(0, np.int32)
    return TransposedIndices(flat_queries=flat, offsets=offsets)


def _naive_pool(x: np.ndarray, B: int, hops: int) -> np.ndarray:
    for _ in range(hops):
        x = x.reshape(-1, B, x.shape[1]).mean(axis=1)
    return x


def mask_backward(dO, q, k, v, sel: SelectionResult, cfg) -> GradientSet:
    """Gradients of the enriched attention with the block pattern read from dense masks.

    Pyramids, forward quantities and the coarse-to-fine gradient spreading are
    all recomputed here from scratch.
    """
    cfg = validate_config(cfg)
    _cap(cfg.n)
    B, L, Le = cfg.block_size, cfg.levels, cfg.enrich_levels
    q, k, v, dO = (np.asarray(a, dtype=np.float64) for a in (q, k, v, dO))
    if not q.shape == k.shape == v.shape == dO.shape == (cfg.n, cfg.d):
        raise ShapeMismatch("mask_backward inputs must all be (N, d)")
    ks = [_naive_pool(k, B, l) for l in range(L + 1)]
    vs = [_naive_pool(v, B, l) for l in range(L + 1)]
    levels = list(range(min(Le, L - 1) + 1)) + ([L] if Le == L else [])
    masks = {}
    for l in levels:
        tq = tk = cfg.level_blocks(l)
        if l == L:
            masks[l] = np.ones((tq, tk), dtype=bool)
        else:
            m = np.zeros((tq, tk), dtype=bool)
            for r, row in enumerate(sel.per_level[l].indices):
                m[r, row] = True
            masks[l] = m

    dq = np.zeros_like(q)
    dks = {l: np.zeros_like(ks[l]) for l in levels}
    dvs = {l: np.zeros_like(vs[l]) for l in levels}
    for i in range(cfg.n_blocks):
        rows = []  # (level, token index, logit factor, bias, value weight)
        for l in levels:
            w = float(B**l)
            for b in np.flatnonzero(masks[l][i // B**l]):
                for t in range(b * B, (b + 1) * B):
                    if cfg.reweight_mode is ReweightMode.SCALE_KV:
                        rows.append((l, t, w, 0.0, w))
                    else:
                        rows.append((l, t, 1.0, math.log(w), 1.0))
        kc = np.array([ks[l][t] for l, t, *_ in rows])
        vc = np.array([vs[l][t] for l, t, *_ in rows])
        fac = np.array([r[2] for r in rows]) * cfg.softmax_scale
        bias = np.array([r[3] for r in rows])
        vw = np.array([r[4] for r in rows])
        sl = slice(i * B, (i + 1) * B)
        s = (q[sl] @ kc.T) * fac + bias
        p = _softmax_rows(s)
        o = p @ (vc * vw[:, None])
        dp = (dO[sl] @ vc.T) * vw
        ds = p * (dp - (dO[sl] * o).sum(axis=1, keepdims=True))
        dq[sl] = (ds * fac) @ kc
        dkc = (ds * fac).T @ q[sl]
        dvc = (p * vw).T @ dO[sl]
        for n, (l, t, *_) in enumerate(rows):
            dks[l][t] += dkc[n]
            dvs[l][t] += dvc[n]

    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for l in levels:
        f = B**l
        for t in range(cfg.level_rows(l)):
            dk[t * f:(t + 1) * f] += dks[l][t] / f
            dv[t * f:(t + 1) * f] += dvs[l][t] / f
    return GradientSet(dq=dq, dk=dk, dv=dv)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: tuple[str, int, int]
    step: float
    n_coords: int

    @property
    def degraded(self) -> bool:
        return self.max_rel_error > 1e-3


def gradient_check(fn, arrays: dict, cotangent, grads: dict, step: float = 1e-6,
                   max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Central differences of the loss ``<fn(**arrays), cotangent>`` against ``grads``.

    The two perturbed outputs are subtracted before contracting with the
    cotangent, so rows the perturbation does not reach cancel exactly.
    The error of a coordinate is ``|fd - an| / max(|fd|, |an|, floor)`` with
    ``floor = 1e-3 * max|an|`` over every checked gradient: coordinates whose
    gradient is numerically zero are judged on the scale of the whole gradient.
    """
    coords = [(name, r, c) for name, a in arrays.items()
              for r in range(a.shape[0]) for c in range(a.shape[1])]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    work = {name: np.array(a, dtype=np.float64, copy=True) for name, a in arrays.items()}
    g = np.asarray(cotangent, dtype=np.longdouble)
    floor = 1e-3 * max(float(np.max(np.abs(gr))) for gr in grads.values())
    floor = max(floor, np.finfo(np.float64).tiny)
    worst, worst_at = 0.0, coords[0]
    for name, r, c in coords:
        a = work[name]
        x0 = a[r, c]
        a[r, c] = x0 + step
        out_p = np.asarray(fn(**work))
        a[r, c] = x0 - step
        out_m = np.asarray(fn(**work))
        a[r, c] = x0
        # the perturbed entry is exactly representable, so divide by the true step
        h = (x0 + step) - (x0 - step)
        fd = float(np.sum((out_p - out_m) * g) / h)
        an = float(grads[name][r, c])
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        if err > worst:
            worst, worst_at = err, (name, r, c)
    return GradCheckReport(max_rel_error=worst, worst_coordinate=worst_at, step=step,
                           n_coords=len(coords))


def _extended_forward(q, k, v, plan: EnrichedKVPlan, cfg) -> np.ndarray:
    """Per-block enriched attention evaluated in ``np.longdouble``.

    Used as the function under differentiation so that the central difference
    is limited by truncation rather than by float64 round-off in O.
    """
    ext = np.longdouble
    B, L = cfg.block_size, cfg.levels
    q, k, v = (np.asarray(a, dtype=ext) for a in (q, k, v))
    ks = [_naive_pool(k, B, l) for l in range(L + 1)]
    vs = [_naive_pool(v, B, l) for l in range(L + 1)]
    scale = ext(cfg.softmax_scale)
    scale_kv = cfg.reweight_mode is ReweightMode.SCALE_KV
    out = np.empty_like(q)
    for i in range(cfg.n_blocks):
        kc, vc, fac, bias = [], [], [], []
        for level, blk, w in plan.entries(i):
            kc.append(ks[level][blk * B:(blk + 1) * B])
            vb = vs[level][blk * B:(blk + 1) * B]
            vc.append(vb * ext(w) if scale_kv else vb)
            fac += [ext(w) if scale_kv else ext(1)] * B
            bias += [ext(0) if scale_kv else np.log(ext(w))] * B
        kc, vc = np.vstack(kc), np.vstack(vc)
        s = (q[i * B:(i + 1) * B] @ kc.T) * (scale * np.asarray(fac)) + np.asarray(bias)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        out[i * B:(i + 1) * B] = (p @ vc) / p.sum(axis=1, keepdims=True)
    return out


def finite_diff_check(inputs, cotangent, cfg, step: float = 1e-6,
                      max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Check the fast backward against central differences of <O(q, k, v), cotangent>.

    The Top-K selection is computed once at the unperturbed point and held
    fixed, matching the backward pass, which treats indices as constants.
    The differenced outputs come from an extended-precision reference forward.
    Every coordinate is checked unless ``max_coords`` is given; instances with
    N > 256 default to a random subsample of 600 coordinates.
    """
    if get_precision() != "double":
        raise PrecisionError("finite-difference checks need double precision")
    cfg = validate_config(cfg)
    _cap(cfg.n)
    q, k, v = (np.asarray(a, dtype=np.float64) for a in inputs)
    g = np.asarray(cotangent, dtype=np.float64)
    B, L = cfg.block_size, cfg.levels
    sel = hierarchical_topk(build_pyramid(q, B, L), build_pyramid(k, B, L), cfg)
    plan = build_plan(sel, cfg)

    def forward(q, k, v):
        return _extended_forward(q, k, v, plan, cfg)

    pk, pv = build_pyramid(k, B, L), build_pyramid(v, B, L)
    state = llsa_forward(q, k, v, pk, pv, plan, cfg)
    grads = llsa_backward(g, state, q, k, v, pk, pv, plan, transpose_all(sel, cfg), cfg)
    if max_coords is None and cfg.n > 256:
        max_coords = 600
    return gradient_check(forward, {"q": q, "k": k, "v": v}, g,
                          {"q": grads.dq, "k": grads.dk, "v": grads.dv},
                          step=step, max_coords=max_coords, seed=seed)
