"""2D -> 1D token order in which every aligned square patch is contiguous.

With block size ``B = s*s`` a pyramid level groups ``B**i`` consecutive
tokens; the order built here makes such a run an ``s**i x s**i`` pixel patch.
Patches are nested Z-order style with base ``s`` digits per axis and the
sub-patches of a patch visited row-major. Images whose sides are not a power
of ``s`` are tiled by top-level patches, themselves in row-major order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DivisibilityError, NotSquareBlock, ShapeMismatch


class Direction(str, Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


@dataclass(frozen=True, eq=False)
class Permutation:
    """``forward[pos]`` is the raster index placed at sequence position ``pos``."""

    forward: np.ndarray
    inverse: np.ndarray
    height: int
    width: int
    levels: int

    @property
    def size(self) -> int:
        return self.forward.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Permutation):
            return NotImplemented
        return np.array_equal(self.forward, other.forward)


def block_side(B: int) -> int:
    s = math.isqrt(B)
    if B < 4 or s * s != B:
        raise NotSquareBlock(f"block size {B} is not the square of an integer >= 2")
    return s


def _max_depth(H: int, W: int, s: int) -> int:
    depth = 0
    while H % s ** (depth + 1) == 0 and W % s ** (depth + 1) == 0:
        depth += 1
    return depth


def build_reorder(H: int, W: int, B: int, levels: int | None = None) -> Permutation:
    """Patch-contiguous order for an ``H x W`` image.

    ``levels`` is the pyramid depth the order must serve; by default the
    deepest depth for which ``s**levels`` divides both sides.
    """
    s = block_side(B)
    if H < 1 or W < 1:
        raise DivisibilityError(f"image {H}x{W} is empty")
    if levels is None:
        levels = _max_depth(H, W, s)
    elif levels < 0 or H % s**levels or W % s**levels:
        raise DivisibilityError(f"image {H}x{W} is not tiled by {s**levels}-pixel patches")
    tile = s**levels
    r, c = np.divmod(np.arange(H * W, dtype=np.int64), W)
    pos = ((r // tile) * (W // tile) + c // tile) * tile * tile
    key = np.zeros_like(pos)
    for j in range(levels - 1, -1, -1):
        key = key * B + ((r // s**j) % s) * s + (c // s**j) % s
    inverse = pos + key
    forward = np.empty_like(inverse)
    forward[inverse] = np.arange(H * W, dtype=np.int64)
    return Permutation(forward=forward, inverse=inverse, height=H, width=W, levels=levels)


def apply_permutation(x, p: Permutation, direction: Direction | str = Direction.FORWARD) -> np.ndarray:
    """Raster rows -> sequence rows (``forward``) or back (``inverse``)."""
    x = np.asarray(x)
    if x.shape[0] != p.size:
        raise ShapeMismatch(f"{x.shape[0]} rows for a permutation of size {p.size}")
    order = p.forward if Direction(direction) is Direction.FORWARD else p.inverse
    return x[order]


def spatial_pool(img, H: int, W: int, s: int) -> np.ndarray:
    """Mean over aligned ``s x s`` pixel squares of a raster (H*W, d) matrix."""
    x = np.asarray(img)
    d = x.shape[1]
    return x.reshape(H // s, s, W // s, s, d).mean(axis=(1, 3)).reshape(-1, d)
