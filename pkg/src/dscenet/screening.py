"""Dynamic screening: random grid encoding plus a residual per-patch gate.

Each bag gets a fresh random ordering of patch positions (the "grid"). The
grid values pass through a tiny two-layer MLP to produce one encoding row per
patch; a sigmoid gate built from that row and the bag's global average then
rescales the patch residually, s = x * gate + x. During evaluation the grid
is pinned to the identity permutation so repeated runs agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, EmptyBagError
from .numerics import Matrix, Node


@dataclass
class ScreeningParams:
    """Grid MLP (1 -> L -> L) and the gate projection (2L -> 1)."""

    fc1_w: Matrix | Node
    fc1_b: Matrix | Node
    fc2_w: Matrix | Node
    fc2_b: Matrix | Node
    gate_w: Matrix | Node
    gate_b: Matrix | Node


@dataclass
class GridEncoding:
    """A permutation of patch positions and its per-patch encoding rows."""

    grid: list[int]
    encoded: Matrix

    def __post_init__(self) -> None:
        n = len(self.grid)
        if sorted(self.grid) != list(range(n)):
            raise ValueError("grid must be a permutation of 0..N-1")
        if self.encoded.rows != n:
            raise DimensionError(f"encoding has {self.encoded.rows} rows for {n} grid values")


def sample_grid(n_patches: int, rng: np.random.Generator | None) -> list[int]:
    """Random permutation of 0..N-1, or the identity when rng is None."""
    if n_patches < 1:
        raise EmptyBagError("cannot build a grid for an empty bag")
    if rng is None:
        return list(range(n_patches))
    return [int(v) for v in rng.permutation(n_patches)]


def grid_values(grid: list[int]) -> Matrix:
    """Grid positions normalized into [0, 1] as an N x 1 column."""
    n = len(grid)
    denom = max(n - 1, 1)
    return Matrix(np.array(grid, dtype=np.float64).reshape(n, 1) / denom)


def encode_grid_node(grid: list[int], params: ScreeningParams) -> Node:
    """Graph version of the grid encoder: N x 1 positions to N x L rows."""
    g = nm.constant(grid_values(grid))
    hidden = nm.relu(nm.affine(g, params.fc1_w, params.fc1_b))
    return nm.affine(hidden, params.fc2_w, params.fc2_b)


def encode_grid(
    n_patches: int,
    params: ScreeningParams,
    rng: np.random.Generator | None = None,
) -> GridEncoding:
    """Sample a grid for a bag of ``n_patches`` and encode it.

    Pass the rng stream derived from (run seed, epoch, case id) during
    training; pass None for the deterministic evaluation-time identity grid.
    """
    grid = sample_grid(n_patches, rng)
    return GridEncoding(grid, encode_grid_node(grid, params).value)


def select_nodes(x: Node, encoded: Node, params: ScreeningParams) -> tuple[Node, Node]:
    """Residual gating in graph form; returns (selected features, gate column)."""
    if encoded.value.rows != x.value.rows:
        raise DimensionError(
            f"encoding rows {encoded.value.rows} != feature rows {x.value.rows}"
        )
    g = nm.repeat_rows(nm.mean_rows(x), x.value.rows)
    gate_in = nm.concat_cols(g, encoded)
    xi = nm.sigmoid(nm.affine(gate_in, params.gate_w, params.gate_b))
    s = nm.add(nm.mul(x, xi), x)
    return s, xi


def select(x: Matrix, enc: GridEncoding, params: ScreeningParams) -> tuple[Matrix, Matrix]:
    """Apply the gate to a feature bag: returns (s = x * xi + x, xi in (0,1)^N)."""
    s, xi = select_nodes(nm.constant(x), nm.constant(enc.encoded), params)
    return s.value, xi.value
