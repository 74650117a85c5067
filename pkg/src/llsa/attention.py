"""Forward pass: streaming softmax over each fine block's enriched key/value set."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import (
    ReweightMode,
    SelectionResult,
    ValidatedConfig,
    as_matrix,
    effective_block_count,
    validate_config,
)
from .errors import NonFiniteError, ShapeMismatch
from .pyramid import Pyramid, build_pyramid
from .selection import hierarchical_topk


@dataclass(frozen=True, eq=False)
class EnrichedKVPlan:
    """Key/value blocks visited by every fine query block, in canonical order.

    Column ``e`` of ``entry_blocks`` holds a block index at pyramid level
    ``entry_levels[e]`` whose reweighting factor is ``weights[e] = B**level``.
    Columns are grouped by ascending level and, within a level, by ascending
    block index.
    """

    entry_levels: np.ndarray  # (E,) int32
    entry_blocks: np.ndarray  # (T, E) int32
    weights: np.ndarray  # (E,) float64
    block_size: int

    @property
    def n_entries(self) -> int:
        return self.entry_levels.shape[0]

    def entries(self, i: int) -> list[tuple[int, int, int]]:
        """(level, block, weight) triples for fine query block ``i``."""
        return [
            (int(l), int(b), int(w))
            for l, b, w in zip(self.entry_levels, self.entry_blocks[i], self.weights)
        ]

    def mode_coefficients(self, cfg: ValidatedConfig):
        """Per-entry (logit scale, logit bias, value weight) for the reweight mode."""
        w = self.weights
        if cfg.reweight_mode is ReweightMode.SCALE_KV:
            return cfg.softmax_scale * w, np.zeros_like(w), w.copy()
        return np.full_like(w, cfg.softmax_scale), np.log(w), np.ones_like(w)


def build_plan(sel: SelectionResult, cfg) -> EnrichedKVPlan:
    cfg = validate_config(cfg)
    B, L, Le = cfg.block_size, cfg.levels, cfg.enrich_levels
    fine = np.arange(cfg.n_blocks)
    cols, levels = [], []
    for l in range(min(Le, L - 1) + 1):
        table = sel.per_level[l].indices
        cols.append(table[fine // B**l])
        levels += [l] * table.shape[1]
    if Le == L:
        tl = cfg.level_blocks(L)
        cols.append(np.broadcast_to(np.arange(tl, dtype=np.int32), (cfg.n_blocks, tl)))
        levels += [L] * tl
    entry_levels = np.asarray(levels, dtype=np.int32)
    plan = EnrichedKVPlan(
        entry_levels=entry_levels,
        entry_blocks=np.ascontiguousarray(np.hstack(cols), dtype=np.int32),
        weights=np.power(float(B), entry_levels),
        block_size=B,
    )
    assert plan.n_entries == effective_block_count(cfg)
    return plan


@dataclass(frozen=True, eq=False)
class ForwardState:
    output: np.ndarray
    row_max: np.ndarray
    row_denom: np.ndarray
    fingerprint: tuple

    @property
    def logsumexp(self) -> np.ndarray:
        return self.row_max + np.log(self.row_denom)


def fingerprint(q, k, v, cfg: ValidatedConfig, plan: EnrichedKVPlan) -> tuple:
    """Cheap identity of a forward call: shapes, config and a strided value checksum."""
    crc = 0
    for a in (q, k, v, plan.entry_blocks):
        step = max(1, a.shape[0] // 64)
        crc = zlib.crc32(np.ascontiguousarray(a[::step]).tobytes(), crc)
    return (q.shape, k.shape, v.shape, plan.entry_blocks.shape, cfg, crc)


def _check_inputs(q, k, v, cfg):
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    for name, a in (("q", q), ("k", k), ("v", v)):
        if a.shape != (cfg.n, cfg.d):
            raise ShapeMismatch(f"{name} has shape {a.shape}, config expects {(cfg.n, cfg.d)}")
    return q, k, v


def llsa_forward(q, k, v, pyr_k: Pyramid, pyr_v: Pyramid, plan: EnrichedKVPlan, cfg) -> ForwardState:
    cfg = validate_config(cfg)
    q, k, v = _check_inputs(q, k, v, cfg)
    if plan.entry_blocks.shape != (cfg.n_blocks, effective_block_count(cfg)):
        raise ShapeMismatch("plan was built for a different configuration")
    if pyr_k.data.dtype != q.dtype or pyr_v.data.dtype != q.dtype:
        raise ShapeMismatch("pyramids and inputs have different precision")
    base = np.ascontiguousarray(pyr_k.offsets[plan.entry_levels], dtype=np.int32)
    esc, ebias, evw = plan.mode_coefficients(cfg)
    out, row_max, row_den = _backend.kernels.attn_forward(
        q, pyr_k.data, pyr_v.data, base, plan.entry_blocks, esc, ebias, evw,
        cfg.block_size, cfg.safe_softmax,
    )
    if not np.isfinite(out).all():
        raise NonFiniteError("attention output is not finite; enable safe_softmax")
    return ForwardState(out, row_max, row_den, fingerprint(q, k, v, cfg, plan))


@dataclass(frozen=True, eq=False)
class Context:
    """Everything the backward pass needs from one :func:`attend` call."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    pyr_q: Pyramid
    pyr_k: Pyramid
    pyr_v: Pyramid
    selection: SelectionResult
    plan: EnrichedKVPlan
    state: ForwardState
    cfg: ValidatedConfig


def attend(q, k, v, cfg) -> tuple[np.ndarray, Context]:
    """Full forward: pyramids, hierarchical selection, enriched attention."""
    cfg = validate_config(cfg)
    q, k, v = _check_inputs(q, k, v, cfg)
    L = cfg.levels
    pyr_q = build_pyramid(q, cfg.block_size, L)
    pyr_k = build_pyramid(k, cfg.block_size, L)
    pyr_v = build_pyramid(v, cfg.block_size, L)
    sel = hierarchical_topk(pyr_q, pyr_k, cfg)
    plan = build_plan(sel, cfg)
    state = llsa_forward(q, k, v, pyr_k, pyr_v, plan, cfg)
    return state.output, Context(q, k, v, pyr_q, pyr_k, pyr_v, sel, plan, state, cfg)


def attend_heads(q, k, v, cfg) -> tuple[np.ndarray, list[Context]]:
    """Independent heads stacked on axis 0: inputs are (H, N, d)."""
    outs, ctxs = [], []
    for h in range(np.shape(q)[0]):
        o, c = attend(q[h], k[h], v[h], cfg)
        outs.append(o)
        ctxs.append(c)
    return np.stack(outs), ctxs


def forward_mul_accs(cfg) -> int:
    """Score plus value multiply-accumulates of one forward pass."""
    cfg = validate_config(cfg)
    return 2 * cfg.n * effective_block_count(cfg) * cfg.block_size * cfg.d

