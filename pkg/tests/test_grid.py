import numpy as np
import pytest

from mpda.grid import (Boundary, GridIndexError, GridSizeError, GridSpec, coarsen, coordinates, linear_index,
                       node_coordinates, parent_indices)


def test_linear_index():
    assert linear_index(GridSpec(4, 4), 0, 0) == 0
    assert linear_index(GridSpec(4, 3), 3, 2) == 11
    assert linear_index(GridSpec(256, 256), 255, 255) == 65535


def test_linear_index_out_of_range():
    g = GridSpec(4, 3)
    with pytest.raises(GridIndexError):
        linear_index(g, 4, 0)
    with pytest.raises(IndexError):
        linear_index(g, 0, -1)
    with pytest.raises(GridIndexError):
        coordinates(g, 12)


def test_index_round_trip():
    g = GridSpec(7, 5)
    for index in range(g.n):
        assert linear_index(g, *coordinates(g, index)) == index
    i, j = node_coordinates(g)
    assert np.array_equal(j * g.nx + i, np.arange(g.n))


def test_grid_validation():
    with pytest.raises(GridSizeError):
        GridSpec(0, 4)
    with pytest.raises(GridSizeError):
        GridSpec(1, 1)
    with pytest.raises(ValueError):
        GridSpec(4, 4, dx=0.0)
    with pytest.raises(GridSizeError):
        GridSpec(4, 4, dy=float('inf'))
    assert GridSpec(8, 1).n == 8, 'one-dimensional grids are allowed'
    assert GridSpec(4, 4, boundary='periodic').boundary is Boundary.PERIODIC


def test_unit_square():
    g = GridSpec.unit_square(16, 8)
    assert g.dx == 1 / 16 and g.dy == 1 / 8
    assert g.shape == (8, 16)


def test_coarsen():
    assert coarsen(GridSpec(256, 256, 1.0, 1.0)) == GridSpec(128, 128, 2.0, 2.0)
    assert coarsen(GridSpec(2500, 1500)) == GridSpec(1250, 750, 2.0, 2.0)
    assert coarsen(GridSpec(33, 33, 1.0, 1.0)) == GridSpec(17, 17, 2.0, 2.0)
    periodic = GridSpec(8, 8, boundary=Boundary.PERIODIC)
    assert coarsen(periodic).boundary is Boundary.PERIODIC


def test_coarsen_repeatedly():
    g = GridSpec(64, 64, 0.5, 0.5)
    for k in range(1, 5):
        g = coarsen(g)
        assert (g.nx, g.ny) == (64 // 2 ** k, 64 // 2 ** k)
        assert g.dx == 0.5 * 2 ** k


def test_coarsen_too_small():
    with pytest.raises(GridSizeError):
        coarsen(GridSpec(3, 2))
    line = coarsen(GridSpec(8, 1))
    assert (line.nx, line.ny, line.dy) == (4, 1, 1.0), 'length-1 axes are left alone'


def test_parent_indices():
    fine, coarse = GridSpec(5, 4), GridSpec(3, 2, 2.0, 2.0)
    parents = parent_indices(fine, coarse)
    assert parents[linear_index(fine, 4, 3)] == linear_index(coarse, 2, 1)
    assert parents[linear_index(fine, 1, 1)] == 0
    with pytest.raises(GridSizeError):
        parent_indices(fine, GridSpec(3, 2))
