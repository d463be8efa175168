import math

import numpy as np
import pytest

from mpda import mp
from mpda.graph import DimensionError, ObservationError, ObservationSet
from mpda.operator import SparseOperator
from mpda.oracle import dense_posterior
from mpda.utils import MPDAError, relative_error
from mpda.var3d import LBFGSStatus, VarProblem, cost, gradient, minimize, strong_wolfe
from tests.conftest import make_problem

CHAIN = SparseOperator.from_dense([[2.0, -0.5, 0.0], [-0.5, 10.0, -1.0], [0.0, -1.0, 2.5]])


def test_cost_examples():
    p = VarProblem(CHAIN, np.zeros(3), ObservationSet.empty())
    assert cost(p, np.zeros(3)) == 0.0
    assert cost(p, [0.0, 1.0, 0.0]) == pytest.approx(5.0)

    observed = VarProblem(CHAIN, np.zeros(3), ObservationSet([2], [1.0], [1.0]))
    assert cost(observed, np.zeros(3)) == pytest.approx(0.5)


def test_gradient_vanishes_at_background():
    background = np.array([0.5, -1.0, 2.0])
    p = VarProblem(CHAIN, background, ObservationSet.empty())
    assert np.array_equal(gradient(p, background), np.zeros(3))


def test_gradient_matches_finite_differences():
    problem = make_problem(6, 0.2, seed=4)
    p = VarProblem.from_prior(problem.grid, problem.hyper, problem.obs)
    f = np.random.default_rng(1).normal(size=p.n)
    g = gradient(p, f)
    step = 1e-5
    for k in range(p.n):
        e = np.zeros(p.n)
        e[k] = step
        numeric = (cost(p, f + e) - cost(p, f - e)) / (2 * step)
        assert g[k] == pytest.approx(numeric, rel=1e-5, abs=1e-6), f'component {k}'


def test_problem_validation():
    with pytest.raises(DimensionError):
        VarProblem(CHAIN, np.zeros(2), ObservationSet.empty())
    with pytest.raises(ObservationError):
        VarProblem(CHAIN, np.zeros(3), ObservationSet([3], [1.0], [1.0]))
    p = VarProblem(CHAIN, np.zeros(3), ObservationSet.empty())
    with pytest.raises(DimensionError):
        cost(p, np.zeros(4))
    with pytest.raises(MPDAError):
        minimize(p, memory=0)


def test_strong_wolfe_accepts_unit_step():
    assert strong_wolfe(lambda t: ((t - 1) ** 2, 2 * (t - 1)), 1.0, -2.0) == 1.0


def test_strong_wolfe_expands():
    step = strong_wolfe(lambda t: ((t - 10) ** 2, 2 * (t - 10)), 100.0, -20.0, c2=0.5)
    assert step == 8.0


def test_strong_wolfe_zooms():
    step = strong_wolfe(lambda t: ((t - 0.3) ** 2, 2 * (t - 0.3)), 0.09, -0.6)
    assert step == pytest.approx(0.3)


def test_strong_wolfe_gives_up():
    assert strong_wolfe(lambda t: (math.inf, 0.0), 1.0, -1.0) is None


def test_minimize_matches_dense_with_full_coverage():
    problem = make_problem(8, 1.0, seed=6)
    p = VarProblem.from_prior(problem.grid, problem.hyper, problem.obs)
    result = minimize(p, tol=1e-8, max_iters=5000)
    assert result.status is LBFGSStatus.CONVERGED
    expected = dense_posterior(problem.graph).mean
    assert np.max(np.abs(result.f_map - expected)) <= 1e-6


def test_minimize_decreases_the_cost(small_problem):
    p = VarProblem.from_prior(small_problem.grid, small_problem.hyper, small_problem.obs)
    result = minimize(p)
    assert result.status is LBFGSStatus.CONVERGED
    assert len(result.cost_history) == result.iterations + 1
    assert np.all(np.diff(result.cost_history) <= 0)
    assert result.gradient_norm <= 1e-3
    assert result.gradient_norm == pytest.approx(np.linalg.norm(gradient(p, result.f_map)))


def test_minimize_from_the_minimizer(small_problem):
    p = VarProblem.from_prior(small_problem.grid, small_problem.hyper, small_problem.obs)
    exact = dense_posterior(small_problem.graph).mean
    result = minimize(p, init=exact)
    assert result.status is LBFGSStatus.CONVERGED
    assert result.iterations <= 1


def test_minimize_max_iters(small_problem):
    p = VarProblem.from_prior(small_problem.grid, small_problem.hyper, small_problem.obs)
    result = minimize(p, tol=1e-14, max_iters=2)
    assert result.status is LBFGSStatus.MAX_ITERS
    assert result.iterations == 2


def test_background_shifts_the_analysis(small_problem):
    background = np.full(small_problem.grid.n, 0.4)
    p = VarProblem.from_prior(small_problem.grid, small_problem.hyper, ObservationSet.empty(), background)
    result = minimize(p)
    assert result.iterations == 0, 'the background is already optimal'
    assert np.array_equal(result.f_map, background)


def test_agrees_with_message_passing(problem16):
    p = VarProblem.from_prior(problem16.grid, problem16.hyper, problem16.obs)
    analysis = minimize(p, tol=1e-9, max_iters=2000)
    passing = mp.run(problem16.graph, problem16.hyper.with_(tau=1e-8))
    assert analysis.status is LBFGSStatus.CONVERGED
    assert relative_error(analysis.f_map, passing.marginals.mean) <= 1e-3


def test_default_tolerance_is_absolute():
    # dense observations make J large; the stop must not scale with it
    problem = make_problem(24, 0.5, seed=2)
    p = VarProblem.from_prior(problem.grid, problem.hyper, problem.obs)
    result = minimize(p)
    assert result.status is LBFGSStatus.CONVERGED
    assert result.cost_history[-1] > 1.0
    assert np.linalg.norm(gradient(p, result.f_map)) <= 1e-3
    assert relative_error(result.f_map, dense_posterior(problem.graph).mean) <= 1e-3


@pytest.mark.parametrize('size, density, seed', [(6, 0.2, 0), (10, 0.1, 1), (12, 0.05, 1), (16, 0.05, 3),
                                                 (16, 0.3, 7)])
def test_tight_tolerance_reaches_the_exact_mean(size, density, seed):
    problem = make_problem(size, density, seed=seed)
    p = VarProblem.from_prior(problem.grid, problem.hyper, problem.obs)
    result = minimize(p, tol=1e-9, max_iters=5000)
    assert result.status is LBFGSStatus.CONVERGED
    assert relative_error(result.f_map, dense_posterior(problem.graph).mean) <= 1e-6
