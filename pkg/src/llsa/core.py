"""Shared types: precision control, configuration and Top-K index tables."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DivisibilityError,
    LevelError,
    NonFiniteError,
    PrecisionError,
    ShapeMismatch,
    TopKError,
)

_PRECISIONS = {"double": np.float64, "single": np.float32}
_precision = os.environ.get("LLSA_PRECISION", "double").lower()
if _precision not in _PRECISIONS:
    raise PrecisionError(f"LLSA_PRECISION must be 'single' or 'double', got {_precision!r}")

INDEX_LIMIT = 2**32


def set_precision(name: str) -> None:
    """Select the element precision used by every module ('single' or 'double')."""
    global _precision
    name = name.lower()
    if name not in _PRECISIONS:
        raise PrecisionError(f"unknown precision {name!r}")
    _precision = name


def get_precision() -> str:
    return _precision


def real_dtype() -> np.dtype:
    return np.dtype(_PRECISIONS[_precision])


def default_tolerance() -> float:
    """Oracle-equivalence tolerance matching the active precision."""
    return 1e-10 if _precision == "double" else 1e-4


def as_matrix(x, name: str = "x", check_finite: bool = True) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D feature matrix in the active precision."""
    a = np.ascontiguousarray(x, dtype=real_dtype())
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeMismatch(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if check_finite and not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


class ReweightMode(str, enum.Enum):
    # literal reading: coarse keys and values are multiplied by W = B^l
    SCALE_KV = "scale_kv"
    # multiplicity reading: logits gain +ln W, keys and values untouched
    LOGIT_BIAS = "logit_bias"


def _ilog(n: int, b: int) -> int:
    """floor(log_b n) using integer arithmetic."""
    k, p = 0, b
    while p <= n:
        p *= b
        k += 1
    return k


def max_levels(n: int, block_size: int) -> int:
    return _ilog(n, block_size) - 1


@dataclass(frozen=True)
class LLSAConfig:
    n: int
    d: int
    block_size: int
    top_k: int
    levels: int
    enrich_levels: int | None = None  # defaults to ``levels``
    softmax_scale: float | None = None  # defaults to 1/sqrt(d)
    reweight_mode: ReweightMode = ReweightMode.SCALE_KV
    safe_softmax: bool = True


@dataclass(frozen=True)
class ValidatedConfig(LLSAConfig):
    """An :class:`LLSAConfig` whose invariants have been checked and defaults resolved."""

    enrich_levels: int = 0
    softmax_scale: float = 1.0

    @property
    def n_blocks(self) -> int:
        return self.n // self.block_size

    def level_rows(self, level: int) -> int:
        """Token count of pyramid level ``level``."""
        return self.n // self.block_size**level

    def level_blocks(self, level: int) -> int:
        """Block count (B tokens each) of pyramid level ``level``."""
        return self.n // self.block_size ** (level + 1)

    def weight(self, level: int) -> int:
        return self.block_size**level


def validate_config(cfg: LLSAConfig) -> ValidatedConfig:
    if isinstance(cfg, ValidatedConfig):
        return cfg
    n, b, k, lv = cfg.n, cfg.block_size, cfg.top_k, cfg.levels
    if n < 1 or cfg.d < 1:
        raise DivisibilityError(f"n and d must be positive (n={n}, d={cfg.d})")
    if b < 2:
        raise DivisibilityError(f"block size must be >= 2, got {b}")
    lmax = max_levels(n, b)
    if not 1 <= lv <= lmax:
        raise LevelError(f"levels={lv} outside [1, {lmax}] for n={n}, B={b}")
    if n % b ** (lv + 1):
        raise DivisibilityError(f"n={n} not divisible by B^(L+1)={b ** (lv + 1)}")
    le = lv if cfg.enrich_levels is None else cfg.enrich_levels
    if not 0 <= le <= lv:
        raise LevelError(f"enrich_levels={le} outside [0, {lv}]")
    # candidates at the coarsest selection are the N/B^L level-L tokens
    coarsest = n // b**lv
    if not 1 <= k <= coarsest:
        raise TopKError(f"top_k={k} outside [1, {coarsest}] (coarsest candidate count)")
    if n // b >= INDEX_LIMIT:
        raise DivisibilityError("block count exceeds the 32-bit index range")
    scale = 1.0 / math.sqrt(cfg.d) if cfg.softmax_scale is None else float(cfg.softmax_scale)
    if not math.isfinite(scale) or scale <= 0:
        raise ValueError(f"softmax_scale must be positive and finite, got {scale}")
    return ValidatedConfig(
        n=n,
        d=cfg.d,
        block_size=b,
        top_k=k,
        levels=lv,
        enrich_levels=le,
        softmax_scale=scale,
        reweight_mode=ReweightMode(cfg.reweight_mode),
        safe_softmax=bool(cfg.safe_softmax),
    )


def auto_levels(n: int, block_size: int, top_k: int) -> int:
    """Deepest admissible hierarchy for (n, B, K); raises if none exists."""
    for lv in range(max_levels(n, block_size), 0, -1):
        try:
            validate_config(LLSAConfig(n, 1, block_size, top_k, lv))
        except (LevelError, DivisibilityError, TopKError):
            continue
        return lv
    raise LevelError(f"no admissible level count for n={n}, B={block_size}, K={top_k}")


def effective_block_count(cfg: ValidatedConfig) -> int:
    """Number of key/value blocks each fine query block attends to.

    K selected blocks at level 0 and at every enriched level below L, plus the
    whole coarsest level when enrichment reaches it.
    """
    fine_levels = min(cfg.enrich_levels, cfg.levels - 1) + 1
    count = cfg.top_k * fine_levels
    if cfg.enrich_levels == cfg.levels:
        count += cfg.level_blocks(cfg.levels)
    return count


@dataclass(frozen=True, eq=False)
class LevelIndices:
    """Top-K key blocks per query block at one pyramid level (rows sorted ascending)."""

    level: int
    indices: np.ndarray  # int32, shape (n_query_blocks, k)

    def __eq__(self, other):
        if not isinstance(other, LevelIndices):
            return NotImplemented
        return self.level == other.level and np.array_equal(self.indices, other.indices)

    @property
    def n_query_blocks(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def check(self, n_key_blocks: int) -> None:
        idx = self.indices
        if idx.size and (idx.min() < 0 or idx.max() >= n_key_blocks):
            raise ValueError(f"level {self.level}: index outside [0, {n_key_blocks})")
        if idx.shape[1] > 1 and not (np.diff(idx, axis=1) > 0).all():
            raise ValueError(f"level {self.level}: rows not strictly ascending")


@dataclass(frozen=True)
class SelectionResult:
    per_level: list[LevelIndices]
    coarsest_full: bool = True
    mul_accs: int = field(default=0, compare=False)

    def dump(self) -> str:
        """Line-oriented text form: ``level l / row i: idx idx ...``."""
        lines = []
        for li in self.per_level:
            for i, row in enumerate(li.indices):
                lines.append(f"level {li.level} / row {i}: " + " ".join(map(str, row)))
        return "\n".join(lines) + "\n"
