"""Hierarchical mean pooling of feature matrices and its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import as_matrix
from .errors import DivisibilityError, ShapeMismatch


@dataclass(frozen=True, eq=False)
class Pyramid:
    """Pooled copies of one matrix, stacked level after level in ``data``.

    ``levels[l]`` is a view of ``data`` with ``N / B**l`` rows; ``offsets[l]`` is
    the first row of level ``l`` inside ``data``.
    """

    data: np.ndarray
    offsets: np.ndarray
    block_size: int

    @property
    def levels(self) -> list[np.ndarray]:
        return [self.data[self.offsets[l]:self.offsets[l + 1]] for l in range(self.n_levels)]

    @property
    def n_levels(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, level: int) -> np.ndarray:
        return self.data[self.offsets[level]:self.offsets[level + 1]]

    def __len__(self) -> int:
        return self.n_levels


def build_pyramid(x, B: int, L: int) -> Pyramid:
    x = as_matrix(x, "x")
    n, d = x.shape
    if B < 2 or L < 0 or n % B**L:
        raise DivisibilityError(f"{n} rows cannot be pooled {L} times by {B}")
    rows = [n // B**l for l in range(L + 1)]
    offsets = np.zeros(L + 2, dtype=np.int64)
    np.cumsum(rows, out=offsets[1:])
    data = np.empty((int(offsets[-1]), d), dtype=x.dtype)
    data[:n] = x
    for l in range(1, L + 1):
        prev = data[offsets[l - 1]:offsets[l]]
        _backend.kernels.pool_mean(prev, B, data[offsets[l]:offsets[l + 1]])
    return Pyramid(data=data, offsets=offsets, block_size=B)


def pool_backward(d_coarse, B: int, hops: int) -> np.ndarray:
    """Adjoint of ``hops`` successive mean-pools: broadcast each row / B**hops."""
    g = np.asarray(d_coarse)
    if g.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D gradient, got shape {g.shape}")
    if hops == 0:
        return g.copy()
    f = B**hops
    return np.repeat(g / f, f, axis=0)
