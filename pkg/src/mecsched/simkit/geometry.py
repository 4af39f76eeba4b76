"""Hexagonal cell layout: axial coordinates, centers and adjacency."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

# a central cell, its ring of six, and one cell of the second ring
DEFAULT_CELLS = ((0, 0), (1, 0), (-1, 1), (0, 1), (1, -1), (0, -1), (-1, 0), (2, -1))

_AXIAL_DIRS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


@dataclass(frozen=True)
class HexGrid:
    """Pointy-top hexagons whose centers are ``pitch`` metres apart."""

    cells: tuple[tuple[int, int], ...] = DEFAULT_CELLS
    pitch: float = 400.0

    @property
    def radius(self) -> float:
        """Center-to-corner distance."""
        return self.pitch / math.sqrt(3)

    def center(self, k: int) -> np.ndarray:
        q, r = self.cells[k]
        return np.array([self.pitch * (q + r / 2), self.pitch * r * math.sqrt(3) / 2])

    @cached_property
    def centers(self) -> np.ndarray:
        return np.array([self.center(k) for k in range(len(self.cells))])

    @cached_property
    def center_xy(self) -> tuple[tuple[float, float], ...]:
        """Centers as plain float pairs, for scalar hot paths."""
        return tuple((float(x), float(y)) for x, y in self.centers)

    @cached_property
    def _adjacency(self) -> dict[int, tuple[int, ...]]:
        index = {c: i for i, c in enumerate(self.cells)}
        adj = {}
        for k, (q, r) in enumerate(self.cells):
            adj[k] = tuple(sorted(index[(q + dq, r + dr)] for dq, dr in _AXIAL_DIRS
                                  if (q + dq, r + dr) in index))
        return adj

    def neighbors(self, k: int) -> tuple[int, ...]:
        return self._adjacency[k]

    def adjacency(self) -> dict[int, tuple[int, ...]]:
        return dict(self._adjacency)

    def nearest(self, pos: np.ndarray) -> int:
        d = np.sum((self.centers - np.asarray(pos)) ** 2, axis=1)
        return int(np.argmin(d))

    def nearest_many(self, pos: np.ndarray) -> np.ndarray:
        """Nearest cell of every row of an (n, 2) position array."""
        d = ((pos[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box of the centers, padded by the inner radius."""
        c = self.centers
        pad = self.pitch / 2
        return c.min(axis=0) - pad, c.max(axis=0) + pad

    def in_border(self, pos: np.ndarray, k: int, width: float) -> bool:
        """True when ``pos`` lies within ``width`` of the edge of cell ``k``.

        The edge is the bisector between the own center and the closest
        foreign center, which sits one pitch away for adjacent cells.
        """
        pos = np.asarray(pos)
        c = self.centers
        own = np.linalg.norm(pos - c[k])
        others = np.delete(np.linalg.norm(c - pos, axis=1), k)
        if others.size == 0:
            return False
        nearest_other = others.min()
        # signed distance to the bisector between the two centers
        return (nearest_other ** 2 - own ** 2) / (2 * self.pitch) < width
