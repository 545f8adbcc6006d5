"""Static pairwise direction/distance encodings and learnable vertex tables.

The pairwise tensor gives attention a geometry channel: for each ordered
pair (i, j) it stores a smoothed one-hot of the 45-degree sector pointing
from i to j plus the L1 and L2 distances, scaled into O(1) range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_DIRECTION_CLASSES = 8
DEFAULT_H_PE = N_DIRECTION_CLASSES + 2  # direction classes + L1 + L2


class GeometryError(ValueError):
    """Coordinates admit no direction or distance scale."""


@dataclass(frozen=True)
class PairwiseEncoding:
    tensor: np.ndarray  # (N, N, h_pe)
    h_pe: int

    def __post_init__(self):
        if self.tensor.shape[-1] != self.h_pe or self.tensor.ndim != 3:
            raise ValueError("pairwise tensor must be N x N x h_pe")
        if self.tensor.shape[0] != self.tensor.shape[1]:
            raise ValueError("pairwise tensor must be square in its first two axes")


@dataclass(frozen=True)
class VertexEncoding:
    """Learnable per-vertex table; width 0 disables the encoding entirely."""

    table: np.ndarray  # (N, h_e)

    @property
    def h_e(self) -> int:
        return self.table.shape[1]


def direction_class(xi: float, yi: float, xj: float, yj: float) -> int:
    """45-degree sector of the bearing i -> j; class 0 is centered due east."""
    theta = math.atan2(yj - yi, xj - xi)
    return int(((theta + math.pi / 8.0) % (2.0 * math.pi)) // (math.pi / 4.0)) % 8


def encode_direction(
    xi: float, yi: float, xj: float, yj: float, smoothing: float = 0.1
) -> np.ndarray:
    """Label-smoothed one-hot over the 8 sectors; coincident points get 1/8."""
    out = np.full(N_DIRECTION_CLASSES, smoothing / (N_DIRECTION_CLASSES - 1))
    if xi == xj and yi == yj:
        out[:] = 1.0 / N_DIRECTION_CLASSES
        return out
    out[direction_class(xi, yi, xj, yj)] = 1.0 - smoothing
    return out


def build_pairwise_encoding(graph, smoothing: float = 0.1) -> PairwiseEncoding:
    """Assemble the (N, N, 10) direction + L1 + L2 tensor for a graph.

    Distances are divided by the maximum pairwise L2 distance so the
    farthest pair's L2 channel is exactly 1. Self pairs (and coincident
    vertices) carry the uniform direction vector and zero distances.
    """
    coords = graph.coordinates
    n = graph.n_vertices
    diff = coords[None, :, :] - coords[:, None, :]  # diff[i, j] = coord_j - coord_i
    l1 = np.abs(diff).sum(axis=2)
    l2 = np.sqrt((diff**2).sum(axis=2))
    scale = l2.max()
    if scale == 0.0:
        raise GeometryError("all coordinates coincide; pairwise geometry is degenerate")

    tensor = np.zeros((n, n, DEFAULT_H_PE))
    for i in range(n):
        for j in range(n):
            tensor[i, j, :N_DIRECTION_CLASSES] = encode_direction(
                coords[i, 0], coords[i, 1], coords[j, 0], coords[j, 1], smoothing
            )
    tensor[:, :, N_DIRECTION_CLASSES] = l1 / scale
    tensor[:, :, N_DIRECTION_CLASSES + 1] = l2 / scale
    return PairwiseEncoding(tensor=tensor, h_pe=DEFAULT_H_PE)


def init_vertex_encoding(n: int, h_e: int, seed: int) -> VertexEncoding:
    """Uniform [-0.05, 0.05] table, deterministic under seed."""
    if h_e < 0:
        raise ValueError("encoding width must be non-negative")
    rng = np.random.default_rng(seed)
    return VertexEncoding(table=rng.uniform(-0.05, 0.05, size=(n, h_e)))
