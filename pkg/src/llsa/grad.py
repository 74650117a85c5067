"""Backward pass without a dense block mask.

dQ is query-major and walks the same plan as the forward pass. dK/dV are
key-major: every key block reads the query blocks that selected it from the
transposed (CSC) index table, so no worker ever writes another block's rows.
Coarse-level key/value gradients are then spread back onto the fine tokens
through the pooling adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .attention import Context, EnrichedKVPlan, ForwardState, _check_inputs, fingerprint
from .core import (
    ReweightMode,
    SelectionResult,
    ValidatedConfig,
    as_matrix,
    effective_block_count,
    validate_config,
)
from .errors import ShapeMismatch, StaleState
from .indexmap import TransposedIndices, full_transpose, transpose_all
from .pyramid import Pyramid, pool_backward


@dataclass(frozen=True, eq=False)
class GradientSet:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray

    def max_abs_diff(self, other: GradientSet) -> float:
        return max(
            float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
            for a, b in ((self.dq, other.dq), (self.dk, other.dk), (self.dv, other.dv))
        )


def _level_coefficients(cfg: ValidatedConfig, level: int) -> tuple[float, float, float]:
    w = float(cfg.block_size**level)
    if cfg.reweight_mode is ReweightMode.SCALE_KV:
        return cfg.softmax_scale * w, 0.0, w
    return cfg.softmax_scale, math.log(w), 1.0


def output_delta(dO: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Per-token D = rowsum(dO * O), in float64."""
    return np.einsum("ij,ij->i", dO.astype(np.float64), out.astype(np.float64))


def _enriched_levels(cfg: ValidatedConfig) -> range:
    return range(min(cfg.enrich_levels, cfg.levels - 1) + 1)


def kv_backward(dO, saved: ForwardState, q, pyr_k: Pyramid, pyr_v: Pyramid,
                transposed: list[TransposedIndices], cfg, D=None) -> tuple[np.ndarray, np.ndarray]:
    """dK, dV over every enriched level, driven by the transposed index tables."""
    cfg = validate_config(cfg)
    B, L = cfg.block_size, cfg.levels
    kern = _backend.kernels
    q = as_matrix(q, "q", check_finite=False)
    dO = as_matrix(dO, "dO", check_finite=False)
    if D is None:
        D = output_delta(dO, saved.output)
    m, den = saved.row_max, saved.row_denom
    dk = dv = None
    tables: list[tuple[int, TransposedIndices]] = [(l, transposed[l]) for l in _enriched_levels(cfg)]
    if cfg.enrich_levels == L:
        tl = cfg.level_blocks(L)
        tables.append((L, full_transpose(tl, tl)))
    for l, tr in tables:
        if tr.n_key_blocks != cfg.level_blocks(l):
            raise ShapeMismatch(f"transposed table for level {l} has {tr.n_key_blocks} key blocks")
        sc, bias, vw = _level_coefficients(cfg, l)
        dk_l, dv_l = kern.kv_backward_csc(
            q, dO, m, den, D, pyr_k[l], pyr_v[l], tr.flat_queries, tr.offsets,
            B**l, sc, bias, vw, B,
        )
        if l == 0:
            dk, dv = dk_l, dv_l
        else:
            dk += pool_backward(dk_l, B, l)
            dv += pool_backward(dv_l, B, l)
    return dk, dv


def kv_backward_masked(dO, saved: ForwardState, q, pyr_k: Pyramid, pyr_v: Pyramid,
                       sel: SelectionResult, cfg, D=None) -> tuple[np.ndarray, np.ndarray]:
    """Baseline dK, dV: build a dense block mask per level and scan its columns."""
    cfg = validate_config(cfg)
    B, L = cfg.block_size, cfg.levels
    kern = _backend.kernels
    q = as_matrix(q, "q", check_finite=False)
    dO = as_matrix(dO, "dO", check_finite=False)
    if D is None:
        D = output_delta(dO, saved.output)
    m, den = saved.row_max, saved.row_denom
    dk = dv = None
    masks = [(l, kern.build_mask(np.ascontiguousarray(sel.per_level[l].indices),
                                 cfg.level_blocks(l))) for l in _enriched_levels(cfg)]
    if cfg.enrich_levels == L:
        tl = cfg.level_blocks(L)
        masks.append((L, np.ones((tl, tl), dtype=np.uint8)))
    for l, mask in masks:
        sc, bias, vw = _level_coefficients(cfg, l)
        dk_l, dv_l = kern.kv_backward_mask(
            q, dO, m, den, D, pyr_k[l], pyr_v[l], mask, B**l, sc, bias, vw, B,
        )
        if l == 0:
            dk, dv = dk_l, dv_l
        else:
            dk += pool_backward(dk_l, B, l)
            dv += pool_backward(dv_l, B, l)
    return dk, dv


def llsa_backward(dO, saved: ForwardState, q, k, v, pyr_k: Pyramid, pyr_v: Pyramid,
                  plan: EnrichedKVPlan, transposed: list[TransposedIndices], cfg) -> GradientSet:
    cfg = validate_config(cfg)
    q, k, v = _check_inputs(q, k, v, cfg)
    dO = as_matrix(dO, "dO")
    if dO.shape != q.shape:
        raise ShapeMismatch(f"dO has shape {dO.shape}, expected {q.shape}")
    if plan.entry_blocks.shape != (cfg.n_blocks, effective_block_count(cfg)):
        raise ShapeMismatch("plan was built for a different configuration")
    if len(transposed) < len(_enriched_levels(cfg)):
        raise ShapeMismatch("missing transposed index tables")
    if saved.fingerprint != fingerprint(q, k, v, cfg, plan):
        raise StaleState("forward state was computed from different inputs or config")

    D = output_delta(dO, saved.output)
    base = np.ascontiguousarray(pyr_k.offsets[plan.entry_levels], dtype=np.int32)
    esc, ebias, evw = plan.mode_coefficients(cfg)
    dq = _backend.kernels.attn_backward_dq(
        q, pyr_k.data, pyr_v.data, dO, saved.row_max, saved.row_denom, D, base,
        plan.entry_blocks, esc, ebias, evw, cfg.block_size,
    )
    dk, dv = kv_backward(dO, saved, q, pyr_k, pyr_v, transposed, cfg, D)
    return GradientSet(dq=dq, dk=dk, dv=dv)


def attend_backward(dO, ctx: Context) -> GradientSet:
    """Backward for :func:`llsa.attention.attend`."""
    transposed = transpose_all(ctx.selection, ctx.cfg)
    return llsa_backward(dO, ctx.state, ctx.q, ctx.k, ctx.v, ctx.pyr_k, ctx.pyr_v,
                         ctx.plan, transposed, ctx.cfg)


def attend_heads_backward(dO, ctxs: list[Context]) -> GradientSet:
    grads = [attend_backward(dO[h], c) for h, c in enumerate(ctxs)]
    return GradientSet(*(np.stack([getattr(g, f) for g in grads]) for f in ("dq", "dk", "dv")))


def backward_mul_accs(cfg) -> int:
    """Multiply-accumulates of one full backward pass (dQ: 3 dots, dK/dV: 4)."""
    cfg = validate_config(cfg)
    return 7 * cfg.n * effective_block_count(cfg) * cfg.block_size * cfg.d
