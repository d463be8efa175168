# pylint: disable=redefined-outer-name
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from pytest import fixture
from sqlalchemy import create_engine

from mpda.graph import FactorGraph, ObservationSet, apply_observations, from_precision
from mpda.grid import GridSpec
from mpda.operator import Hyperparams, SparseOperator, build_precision
from mpda.oracle import Field, make_synthetic


class Problem(NamedTuple):
    """A synthetic assimilation problem and its posterior factor graph."""
    grid: GridSpec
    hyper: Hyperparams
    truth: Field
    obs: ObservationSet
    graph: FactorGraph


def chain_graph(n: int, diagonal: float = 3.0, off: float = -1.0, seed: int = 0) -> FactorGraph:
    """Tridiagonal SPD precision with a random shift: a tree-shaped factor graph."""
    P = sp.diags([np.full(n - 1, off), np.full(n, diagonal), np.full(n - 1, off)], [-1, 0, 1])
    shift = np.random.default_rng(seed).normal(size=n)
    return from_precision(SparseOperator(P), shift)


def make_problem(size: int, density: float = 0.05, seed: int = 3, **changes) -> Problem:
    grid = GridSpec.unit_square(size, size)
    hyper = Hyperparams.synthetic_defaults(**changes)
    truth, obs = make_synthetic(grid, hyper, density, seed)
    graph = apply_observations(from_precision(build_precision(grid, hyper)), obs)
    return Problem(grid, hyper, truth, obs, graph)


@fixture
def sync_db_engine():
    """Create a test SQLAlchemy database engine."""
    engine = create_engine('sqlite:///:memory:')
    return engine


@fixture
def two_chain():
    """P = [[2, -1], [-1, 2]], h = [1, 0]; the posterior mean is [2/3, 1/3]."""
    return from_precision(SparseOperator.from_dense([[2.0, -1.0], [-1.0, 2.0]]), np.array([1.0, 0.0]))


@fixture
def three_chain():
    """A 3-node chain whose middle node has two neighbors."""
    P = SparseOperator.from_dense([[2.0, -0.5, 0.0], [-0.5, 3.0, -1.0], [0.0, -1.0, 2.5]])
    return from_precision(P, np.array([1.0, -2.0, 0.5]))


@fixture
def hyper():
    return Hyperparams.synthetic_defaults()


@fixture
def small_problem():
    """12x12 unit square, 5% observed."""
    return make_problem(12, 0.05, seed=1)


@fixture
def problem16():
    """16x16 unit square, 5% observed (the loopy fixed-point check)."""
    return make_problem(16, 0.05, seed=3)
