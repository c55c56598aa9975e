"""Block tiling of GEMM-form weight matrices and the row/column groups inside.

A layer's ``R x C`` weight matrix is cut into ``m x n`` tiles enumerated
row-major over the tile grid. When ``m`` or ``n`` does not divide the matrix,
the trailing tiles are smaller (ragged edge); nothing is padded.

Group-wise quantities are computed in bulk on a zero-padded
``(Br, m, Bc, n)`` view. Row-group arrays have shape ``(Br, Bc, m)`` and
column-group arrays ``(Br, Bc, n)``; their C-order flattening is block-major
then index, the same order as :func:`enumerate_groups`, with phantom entries
(indices that fall past a ragged edge) included and flagged by
:func:`valid_groups`.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
import re

import numpy as np

from .tensor import ShapeError

DIRECTIONS = ("row", "column")


class ConfigError(ValueError):
    """Invalid block or pruning configuration."""


@dataclass(frozen=True)
class BlockScheme:
    m: int
    n: int
    layer_rows: int
    layer_cols: int
    ragged_policy: str = "ragged-edge"
    clamped: bool = False

    @property
    def grid(self) -> tuple[int, int]:
        return math.ceil(self.layer_rows / self.m), math.ceil(self.layer_cols / self.n)

    @property
    def num_blocks(self) -> int:
        br, bc = self.grid
        return br * bc

    @property
    def shape(self) -> tuple[int, int]:
        return self.layer_rows, self.layer_cols

    def block_extent(self, j: int) -> tuple[int, int, int, int]:
        """``(r0, r1, c0, c1)`` half-open extent of block ``j``."""
        br, bc = self.grid
        if not 0 <= j < br * bc:
            raise IndexError(f"block {j} out of range for {br}x{bc} grid")
        bi, bj = divmod(j, bc)
        r0, c0 = bi * self.m, bj * self.n
        return r0, min(r0 + self.m, self.layer_rows), c0, min(c0 + self.n, self.layer_cols)

    def group_shape(self, direction: str) -> tuple[int, int, int]:
        br, bc = self.grid
        return (br, bc, self.m) if direction == "row" else (br, bc, self.n)

    def describe(self) -> str:
        return f"{self.m}x{self.n}"


def partition(layer_rows: int, layer_cols: int, m: int, n: int) -> BlockScheme:
    if layer_rows < 1 or layer_cols < 1:
        raise ConfigError(f"matrix must be nonempty, got {layer_rows}x{layer_cols}")
    if not 1 <= m <= layer_rows or not 1 <= n <= layer_cols:
        raise ConfigError(f"block {m}x{n} does not fit a {layer_rows}x{layer_cols} matrix")
    return BlockScheme(m, n, layer_rows, layer_cols)


def scheme_for_layer(layer_rows: int, layer_cols: int, m: int | None, n: int | None) -> BlockScheme:
    """Like :func:`partition` but clamps an oversized block to the matrix.

    ``m=None``/``n=None`` means the whole dimension. The result records
    whether a clamp happened so reports can list it.
    """
    mm = layer_rows if m is None else m
    nn = layer_cols if n is None else n
    if mm < 1 or nn < 1:
        raise ConfigError(f"block dims must be positive, got {mm}x{nn}")
    clamped = (m is not None and m > layer_rows) or (n is not None and n > layer_cols)
    s = partition(layer_rows, layer_cols, min(mm, layer_rows), min(nn, layer_cols))
    return BlockScheme(s.m, s.n, s.layer_rows, s.layer_cols, clamped=clamped)


_BLOCK_RE = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*$")


def parse_block(text: str) -> tuple[int | None, int | None]:
    """``"4x16"`` -> ``(4, 16)``; ``"whole"`` -> ``(None, None)``."""
    if text.strip().lower() == "whole":
        return None, None
    match = _BLOCK_RE.match(text)
    if not match:
        raise ConfigError(f"block must look like '4x16' or 'whole', got {text!r}")
    m, n = int(match.group(1)), int(match.group(2))
    if m < 1 or n < 1:
        raise ConfigError(f"block dims must be positive, got {text!r}")
    return m, n


@dataclass(frozen=True)
class GroupRef:
    layer: int
    block: int
    direction: str
    index: int
    rows: tuple[int, int]
    cols: tuple[int, int]

    @property
    def size(self) -> int:
        return (self.rows[1] - self.rows[0]) * (self.cols[1] - self.cols[0])

    def coords(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(*self.rows) for c in range(*self.cols)]


def enumerate_groups(scheme: BlockScheme, direction: str, layer: int = 0) -> list[GroupRef]:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    groups = []
    for j in range(scheme.num_blocks):
        r0, r1, c0, c1 = scheme.block_extent(j)
        if direction == "row":
            groups += [GroupRef(layer, j, direction, p, (r0 + p, r0 + p + 1), (c0, c1))
                       for p in range(r1 - r0)]
        else:
            groups += [GroupRef(layer, j, direction, q, (r0, r1), (c0 + q, c0 + q + 1))
                       for q in range(c1 - c0)]
    return groups


def group_norm(weights: np.ndarray, g: GroupRef) -> float:
    if g.rows[1] > weights.shape[0] or g.cols[1] > weights.shape[1]:
        raise IndexError(f"group {g} outside weights of shape {weights.shape}")
    seg = weights[g.rows[0]:g.rows[1], g.cols[0]:g.cols[1]]
    return float(np.sqrt(np.sum(seg * seg)))


def blocked(weights: np.ndarray, scheme: BlockScheme) -> np.ndarray:
    """Zero-padded ``(Br, m, Bc, n)`` copy of ``weights``."""
    if weights.shape != scheme.shape:
        raise ShapeError(f"weights {weights.shape} do not match scheme {scheme.shape}")
    br, bc = scheme.grid
    pr, pc = br * scheme.m, bc * scheme.n
    if (pr, pc) == weights.shape:
        return weights.reshape(br, scheme.m, bc, scheme.n)
    padded = np.zeros((pr, pc), dtype=weights.dtype)
    padded[:weights.shape[0], :weights.shape[1]] = weights
    return padded.reshape(br, scheme.m, bc, scheme.n)


def unblocked(arr: np.ndarray, scheme: BlockScheme) -> np.ndarray:
    br, m, bc, n = arr.shape
    return arr.reshape(br * m, bc * n)[:scheme.layer_rows, :scheme.layer_cols]


def group_sq_norms(weights: np.ndarray, scheme: BlockScheme, direction: str) -> np.ndarray:
    b = blocked(weights, scheme)
    sq = b * b
    if direction == "row":
        return sq.sum(axis=3).transpose(0, 2, 1)  # (Br, Bc, m)
    return sq.sum(axis=1)  # (Br, Bc, n)


def group_norms(weights: np.ndarray, scheme: BlockScheme, direction: str) -> np.ndarray:
    return np.sqrt(group_sq_norms(weights, scheme, direction))


def valid_groups(scheme: BlockScheme, direction: str) -> np.ndarray:
    br, bc = scheme.grid
    if direction == "row":
        idx = np.arange(br)[:, None, None] * scheme.m + np.arange(scheme.m)[None, None, :]
        return np.broadcast_to(idx < scheme.layer_rows, (br, bc, scheme.m)).copy()
    idx = np.arange(bc)[None, :, None] * scheme.n + np.arange(scheme.n)[None, None, :]
    return np.broadcast_to(idx < scheme.layer_cols, (br, bc, scheme.n)).copy()


def expand_groups(values: np.ndarray, scheme: BlockScheme, direction: str) -> np.ndarray:
    """Broadcast a per-group array back to an ``R x C`` per-element array."""
    br, bc = scheme.grid
    if direction == "row":
        full = np.broadcast_to(values.transpose(0, 2, 1)[:, :, :, None],
                               (br, scheme.m, bc, scheme.n))
    else:
        full = np.broadcast_to(values[:, None, :, :], (br, scheme.m, bc, scheme.n))
    return np.ascontiguousarray(unblocked(full, scheme))


@dataclass
class LayerMask:
    """Surviving groups of one layer, per block and direction.

    The elementwise mask is the intersection of surviving row groups and
    surviving column groups of each block.
    """

    scheme: BlockScheme
    row_alive: np.ndarray
    col_alive: np.ndarray

    @classmethod
    def full(cls, scheme: BlockScheme) -> "LayerMask":
        return cls(scheme, valid_groups(scheme, "row"), valid_groups(scheme, "column"))

    def alive(self, direction: str) -> np.ndarray:
        return self.row_alive if direction == "row" else self.col_alive

    def elements(self) -> np.ndarray:
        return expand_groups(self.row_alive, self.scheme, "row") & \
            expand_groups(self.col_alive, self.scheme, "column")

    def surviving(self) -> int:
        return int(self.elements().sum())

    def __eq__(self, other):
        return (isinstance(other, LayerMask) and self.scheme == other.scheme
                and np.array_equal(self.row_alive, other.row_alive)
                and np.array_equal(self.col_alive, other.col_alive))


@dataclass
class SparseMask:
    layers: list[LayerMask]

    def elements(self) -> list[np.ndarray]:
        return [l.elements() for l in self.layers]

    @property
    def total(self) -> int:
        return sum(l.scheme.layer_rows * l.scheme.layer_cols for l in self.layers)

    @property
    def surviving(self) -> int:
        return sum(l.surviving() for l in self.layers)

    @property
    def compression_rate(self) -> float:
        alive = self.surviving
        return math.inf if alive == 0 else self.total / alive


def apply_mask(weights: np.ndarray, mask) -> np.ndarray:
    """Copy of ``weights`` with masked-out entries set to exactly ``0.0``."""
    elems = mask.elements() if isinstance(mask, LayerMask) else np.asarray(mask, dtype=bool)
    if elems.shape != weights.shape:
        raise ShapeError(f"mask {elems.shape} does not match weights {weights.shape}")
    return np.where(elems, weights, 0.0)
