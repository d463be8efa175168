"""Rectangular lattice geometry.

Nodes are numbered row-major and 0-based: node (i, j) has linear index
``j * nx + i``, so x varies fastest in memory.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .utils import MPDAError


class GridIndexError(MPDAError, IndexError):
    """Raised for coordinates or indices outside the grid."""
    pass


class GridSizeError(MPDAError, ValueError):
    """Raised for an invalid grid or a grid too small to coarsen."""
    pass


class Boundary(str, Enum):
    DIRICHLET = 'dirichlet'
    PERIODIC = 'periodic'


@dataclass(frozen=True)
class GridSpec:
    """Geometry of an ``nx`` by ``ny`` lattice with spacings ``dx`` and ``dy``.

    An axis of length 1 is allowed so that one-dimensional problems can be
    expressed; it carries no second difference.
    """

    nx: int
    ny: int
    dx: float = 1.0
    dy: float = 1.0
    boundary: Boundary = Boundary.DIRICHLET

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 1 or self.ny < 1:
            raise GridSizeError(f"grid dimensions must be positive integers, got {self.nx}x{self.ny}")
        if self.nx * self.ny < 2:
            raise GridSizeError("a grid needs at least two nodes")
        for name in ('dx', 'dy'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise GridSizeError(f"{name} must be positive and finite, got {value}")
        object.__setattr__(self, 'nx', int(self.nx))
        object.__setattr__(self, 'ny', int(self.ny))
        object.__setattr__(self, 'boundary', Boundary(self.boundary))

    @classmethod
    def unit_square(cls, nx: int, ny: int, boundary: Boundary = Boundary.DIRICHLET) -> "GridSpec":
        """Grid covering the unit square, ``dx = 1/nx`` and ``dy = 1/ny``."""
        return cls(nx, ny, 1.0 / nx, 1.0 / ny, boundary)

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape of a field on this grid, ``(ny, nx)``."""
        return self.ny, self.nx

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def __str__(self):
        return f'{self.nx}x{self.ny} (dx={self.dx:g}, dy={self.dy:g}, {self.boundary.value})'


def linear_index(g: GridSpec, i: int, j: int) -> int:
    """Linear index of node ``(i, j)``.

    Raises:
        GridIndexError: If the coordinates fall outside the grid.
    """
    if not (0 <= i < g.nx and 0 <= j < g.ny):
        raise GridIndexError(f"node ({i}, {j}) outside grid {g.nx}x{g.ny}")
    return j * g.nx + i


def coordinates(g: GridSpec, index: int) -> tuple[int, int]:
    """Inverse of :func:`linear_index`."""
    if not 0 <= index < g.n:
        raise GridIndexError(f"index {index} outside grid of {g.n} nodes")
    j, i = divmod(index, g.nx)
    return i, j


def node_coordinates(g: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectors ``(i, j)`` of the coordinates of every node in index order."""
    index = np.arange(g.n)
    return index % g.nx, index // g.nx


def coarsen(g: GridSpec) -> GridSpec:
    """Halve the node count per axis (ceiling) and double the spacing.

    Axes of length 1 are left untouched.

    Raises:
        GridSizeError: If an axis would drop below 2 nodes.
    """
    nx = math.ceil(g.nx / 2) if g.nx > 1 else 1
    ny = math.ceil(g.ny / 2) if g.ny > 1 else 1
    if (g.nx > 1 and nx < 2) or (g.ny > 1 and ny < 2):
        raise GridSizeError(f"grid {g.nx}x{g.ny} is too small to coarsen")
    return replace(g,
                   nx=nx, ny=ny,
                   dx=2 * g.dx if g.nx > 1 else g.dx,
                   dy=2 * g.dy if g.ny > 1 else g.dy)


def parent_indices(fine: GridSpec, coarse: GridSpec) -> np.ndarray:
    """Linear index on `coarse` of the parent ``(i // 2, j // 2)`` of every fine node.

    Raises:
        GridSizeError: If `coarse` is not the coarsening of `fine`.
    """
    if coarsen(fine) != coarse:
        raise GridSizeError(f"{coarse} is not the coarsening of {fine}")
    i, j = node_coordinates(fine)
    pi = i // 2 if fine.nx > 1 else i
    pj = j // 2 if fine.ny > 1 else j
    return pj * coarse.nx + pi
