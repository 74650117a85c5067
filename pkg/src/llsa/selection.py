"""Coarse-to-fine Top-K block selection over a pooled pyramid."""

from __future__ import annotations

import numpy as np

from . import _backend
from .core import LevelIndices, SelectionResult, as_matrix, validate_config
from .errors import ShapeMismatch, TopKError
from .pyramid import Pyramid


def select_coarsest(q_top, k_top, K: int, scale: float = 1.0, level: int = 1) -> LevelIndices:
    """Full Top-K of every coarsest query token against every coarsest key token.

    Each level-L token stands for one level-(L-1) block, so the result is the
    level-(L-1) index table. ``level`` is the level of ``q_top`` (only recorded).
    """
    q_top = as_matrix(q_top, "q_top", check_finite=False)
    k_top = as_matrix(k_top, "k_top", check_finite=False)
    if q_top.shape[1] != k_top.shape[1]:
        raise ShapeMismatch("query and key feature dims differ")
    if not 1 <= K <= k_top.shape[0]:
        raise TopKError(f"K={K} exceeds the {k_top.shape[0]} candidates")
    idx = _backend.kernels.topk_full(q_top, k_top, int(K), float(scale))
    return LevelIndices(level=level - 1, indices=idx)


def select_level(q_l, k_l, parent: LevelIndices, K: int, B: int, scale: float = 1.0) -> LevelIndices:
    """Refine one level: rank the K*B child tokens of each parent block set.

    ``q_l``/``k_l`` are level-l matrices and ``parent`` is the level-l table
    (one row per level-l query block). Returns the level-(l-1) table with one
    row per level-l query token.
    """
    q_l = as_matrix(q_l, "q_l", check_finite=False)
    k_l = as_matrix(k_l, "k_l", check_finite=False)
    parents = np.ascontiguousarray(parent.indices, dtype=np.int32)
    if q_l.shape[0] != parents.shape[0] * B:
        raise ShapeMismatch(
            f"{q_l.shape[0]} query tokens do not match {parents.shape[0]} parent rows of B={B}"
        )
    if K > parents.shape[1] * B:
        raise TopKError(f"K={K} exceeds the {parents.shape[1] * B} gathered candidates")
    idx = _backend.kernels.topk_gather(q_l, k_l, parents, int(K), int(B), float(scale))
    return LevelIndices(level=parent.level - 1, indices=idx)


def hierarchical_topk(pyr_q: Pyramid, pyr_k: Pyramid, cfg) -> SelectionResult:
    cfg = validate_config(cfg)
    B, K, L = cfg.block_size, cfg.top_k, cfg.levels
    if pyr_q.n_levels < L + 1 or pyr_k.n_levels < L + 1 or pyr_q.block_size != B:
        raise ShapeMismatch("pyramids were built with a different block size or depth")
    scale = cfg.softmax_scale
    per_level: list[LevelIndices | None] = [None] * L
    per_level[L - 1] = select_coarsest(pyr_q[L], pyr_k[L], K, scale, level=L)
    mul_accs = pyr_q[L].shape[0] * pyr_k[L].shape[0] * cfg.d
    for l in range(L - 1, 0, -1):
        per_level[l - 1] = select_level(pyr_q[l], pyr_k[l], per_level[l], K, B, scale)
        mul_accs += pyr_q[l].shape[0] * K * B * cfg.d
    return SelectionResult(per_level=per_level, coarsest_full=True, mul_accs=mul_accs)
