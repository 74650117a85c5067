"""Key-major (CSC) reverse lookup of a query-major Top-K index table."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import LevelIndices, SelectionResult, validate_config
from .errors import IndexOutOfRange


@dataclass(frozen=True, eq=False)
class TransposedIndices:
    """``flat_queries[offsets[b]:offsets[b + 1]]`` lists the query blocks that chose key block ``b``."""

    flat_queries: np.ndarray  # int32, length T*K
    offsets: np.ndarray  # intp, length T_k + 1

    @property
    def n_key_blocks(self) -> int:
        return self.offsets.shape[0] - 1

    def segment(self, b: int) -> np.ndarray:
        return self.flat_queries[self.offsets[b]:self.offsets[b + 1]]

    def pairs(self) -> list[tuple[int, int]]:
        """Expand back to sorted (query block, key block) pairs."""
        out = []
        for b in range(self.n_key_blocks):
            out.extend((int(i), b) for i in self.segment(b))
        return sorted(out)

    def __eq__(self, other):
        if not isinstance(other, TransposedIndices):
            return NotImplemented
        return np.array_equal(self.flat_queries, other.flat_queries) and np.array_equal(
            self.offsets, other.offsets
        )


def _as_table(idx) -> np.ndarray:
    table = idx.indices if isinstance(idx, LevelIndices) else idx
    return np.ascontiguousarray(table, dtype=np.int32)


def transpose_indices(idx, n_key_blocks: int, n_chunks: int = 0) -> TransposedIndices:
    """Counting pass, prefix sum, then a scatter with running per-key cursors.

    ``n_chunks`` splits the rows into independently counted ranges (one per
    worker by default); the output does not depend on it.
    """
    table = _as_table(idx)
    if table.size and (table.min() < 0 or table.max() >= n_key_blocks):
        raise IndexOutOfRange(f"index outside [0, {n_key_blocks})")
    kern = _backend.kernels
    flat, offsets = kern.transpose(table, int(n_key_blocks), int(n_chunks))
    return TransposedIndices(flat_queries=flat, offsets=np.asarray(offsets, dtype=np.intp))


def transpose_all(sel: SelectionResult, cfg) -> list[TransposedIndices]:
    cfg = validate_config(cfg)
    return [
        transpose_indices(li, cfg.level_blocks(li.level))
        for li in sel.per_level
    ]


def full_transpose(n_query_blocks: int, n_key_blocks: int) -> TransposedIndices:
    """Transposed form of the dense all-to-all pattern used at the coarsest level."""
    flat = np.tile(np.arange(n_query_blocks, dtype=np.int32), n_key_blocks)
    offsets = np.arange(n_key_blocks + 1, dtype=np.intp) * n_query_blocks
    return TransposedIndices(flat_queries=flat, offsets=offsets)


def table_pairs(idx) -> list[tuple[int, int]]:
    """Sorted (query block, key block) pairs of a query-major table."""
    table = _as_table(idx)
    return sorted((i, int(b)) for i, row in enumerate(table) for b in row)
