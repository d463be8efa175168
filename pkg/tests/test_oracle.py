import math

import numpy as np
import pytest

from mpda.graph import ObservationSet, apply_observations, from_precision
from mpda.grid import Boundary, GridSpec
from mpda.operator import (Hyperparams, ParameterError, SparseOperator, build_precision, build_shift_operator,
                           matern_covariance)
from mpda.oracle import (DenseLimitError, Field, FieldError, GridMismatchError, NotSPDError, WeightError,
                         dense_posterior, dense_posterior_mean, l1_error_field, latitude_weights, make_synthetic,
                         observe, rmse, sample_gmrf, track_nodes)
from mpda.utils import Stream, rng


def line(values) -> Field:
    return Field(GridSpec(len(values), 1), values)


def test_dense_posterior_two_nodes(two_chain):
    posterior = dense_posterior(two_chain, with_variance=True)
    assert posterior.mean == pytest.approx([2 / 3, 1 / 3], abs=1e-14)
    assert posterior.variance == pytest.approx([2 / 3, 2 / 3], abs=1e-14)
    assert dense_posterior(two_chain).variance is None


def test_dense_posterior_diagonal():
    graph = from_precision(SparseOperator.from_dense(np.diag([4.0, 2.0])), np.array([2.0, 3.0]))
    assert dense_posterior(graph).mean == pytest.approx([0.5, 1.5], rel=1e-14)


def test_dense_posterior_errors(two_chain):
    with pytest.raises(DenseLimitError):
        dense_posterior(two_chain, limit=1)
    indefinite = from_precision(SparseOperator.from_dense([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))
    with pytest.raises(NotSPDError):
        dense_posterior(indefinite)


def test_dense_posterior_mean_field(two_chain):
    field = dense_posterior_mean(two_chain)
    assert field.grid == GridSpec(2, 1)
    field = dense_posterior_mean(two_chain, GridSpec(1, 2))
    assert field.as_array().shape == (2, 1)
    with pytest.raises(GridMismatchError):
        dense_posterior_mean(two_chain, GridSpec(3, 1))


def test_dense_posterior_matches_independent_solve():
    g = GridSpec.unit_square(10, 10)
    P = build_precision(g, Hyperparams.synthetic_defaults())
    obs = ObservationSet([3, 17, 55, 98], [0.5, -1.0, 2.0, 0.1], 0.0121)
    posterior = dense_posterior(apply_observations(from_precision(P), obs)).mean
    H = np.zeros((4, g.n))
    H[np.arange(4), obs.index] = 1
    expected = np.linalg.solve(P.to_dense() + H.T @ H / 0.0121, H.T @ obs.value / 0.0121)
    assert np.max(np.abs(posterior - expected)) <= 1e-10 * np.max(np.abs(expected))


def test_field_validation():
    g = GridSpec(3, 2)
    with pytest.raises(FieldError):
        Field(g, np.zeros(5))
    with pytest.raises(FieldError):
        Field(g, [0.0, 1.0, math.nan, 0.0, 0.0, 0.0])
    field = Field(g, np.arange(6))
    assert field.as_array()[1, 0] == 3.0
    assert len(Field.constant(g, 2.5)) == 6


def test_sampler_is_deterministic(hyper):
    g = GridSpec.unit_square(16, 16)
    first = sample_gmrf(g, hyper, 5)
    assert np.array_equal(first.values, sample_gmrf(g, hyper, 5).values)
    assert not np.array_equal(first.values, sample_gmrf(g, hyper, 6).values)


def test_sampler_solves_the_spde(hyper):
    g = GridSpec.unit_square(20, 16)
    field = sample_gmrf(g, hyper, 11)
    z = rng(11, Stream.FIELD).standard_normal(g.n)
    rhs = math.sqrt(hyper.sigma2 * hyper.q / g.cell_area) * z
    residual = build_shift_operator(g, hyper.kappa) @ field.values - rhs
    assert np.linalg.norm(residual) <= 1e-7 * np.linalg.norm(rhs)


def test_sampler_needs_dirichlet(hyper):
    with pytest.raises(ParameterError):
        sample_gmrf(GridSpec.unit_square(8, 8, Boundary.PERIODIC), hyper, 0)


def test_make_synthetic(hyper):
    g = GridSpec.unit_square(64, 64)
    truth, obs = make_synthetic(g, hyper, 0.05, 2)
    assert len(obs) == 204
    assert np.all(np.diff(obs.index) > 0), 'distinct and sorted'
    assert np.all(obs.variance == hyper.sigma_y2)
    noise = obs.value - truth.values[obs.index]
    expected = rng(2, Stream.NOISE).standard_normal(len(obs)) * math.sqrt(hyper.sigma_y2)
    assert np.allclose(noise, expected, rtol=0, atol=1e-12)


def test_make_synthetic_full_coverage(hyper):
    g = GridSpec.unit_square(8, 8)
    _, obs = make_synthetic(g, hyper, 1.0, 0)
    assert list(obs.index) == list(range(g.n))
    for density in (0.0, 1.5):
        with pytest.raises(ParameterError):
            make_synthetic(g, hyper, density, 0)


def test_observe_is_reproducible(hyper):
    truth = Field.constant(GridSpec(6, 6), 1.0)
    first = observe(truth, [1, 4, 9], hyper, 3)
    second = observe(truth, [1, 4, 9], hyper, 3)
    assert np.array_equal(first.value, second.value)
    assert list(first.index) == [1, 4, 9]


def test_track_nodes():
    g = GridSpec(32, 16)
    nodes = track_nodes(g, 3, 2.0, 7)
    assert np.array_equal(nodes, track_nodes(g, 3, 2.0, 7))
    assert np.all(np.diff(nodes) > 0)
    assert 0 < len(nodes) < g.n
    assert len(track_nodes(g, 1, 2.0 * g.nx, 0)) == g.n, 'a swath wider than the grid covers it'
    with pytest.raises(ParameterError):
        track_nodes(g, 0, 2.0, 0)


def test_rmse():
    truth = line([1.0, 2.0, 5.0])
    assert rmse(line([1.0, 2.0, 3.0]), truth) == pytest.approx(math.sqrt(4 / 3))
    assert rmse(truth, truth) == 0.0
    assert rmse(line([1.0, 2.0, 3.0]), truth, line([1.0, 1.0, 0.0])) == 0.0
    assert rmse(line([2.0, 2.0, 3.0]), truth, line([3.0, 1.0, 0.0])) == pytest.approx(math.sqrt(3 / 4))


def test_rmse_errors():
    truth = line([1.0, 2.0, 5.0])
    with pytest.raises(WeightError):
        rmse(truth, truth, line([0.0, 0.0, 0.0]))
    with pytest.raises(WeightError):
        rmse(truth, truth, line([1.0, -1.0, 1.0]))
    with pytest.raises(GridMismatchError):
        rmse(truth, line([1.0, 2.0]))


def test_l1_error_field():
    error = l1_error_field(line([1.0, -2.0]), line([0.0, 0.0]))
    assert list(error.values) == [1.0, 2.0]


def test_latitude_weights():
    weights = latitude_weights(GridSpec(2, 3))
    assert weights.values == pytest.approx([0.5, 0.5, 1.0, 1.0, 0.5, 0.5])
    band = latitude_weights(GridSpec(4, 2), 0.0, 60.0)
    assert band.values[:4] == pytest.approx([math.cos(math.radians(15))] * 4)
    with pytest.raises(ParameterError):
        latitude_weights(GridSpec(4, 2), 10.0, 10.0)


@pytest.mark.slow
def test_observation_count_on_large_grid(hyper):
    _, obs = make_synthetic(GridSpec.unit_square(256, 256), hyper, 0.05, 0)
    assert len(obs) == 3276


@pytest.mark.slow
def test_prior_variance_near_centre(hyper):
    g = GridSpec.unit_square(48, 48)
    prior = dense_posterior(from_precision(build_precision(g, hyper)), with_variance=True)
    centre = 24 * g.nx + 24
    assert prior.variance[centre] == pytest.approx(hyper.sigma2, rel=0.15)


@pytest.mark.slow
def test_sample_variance_matches_prior(hyper):
    g = GridSpec.unit_square(32, 32)
    variance = dense_posterior(from_precision(build_precision(g, hyper)), with_variance=True).variance
    ratios = [np.mean(sample_gmrf(g, hyper, seed).values ** 2 / variance) for seed in range(50)]
    assert np.mean(ratios) == pytest.approx(1.0, rel=0.15)


@pytest.mark.slow
def test_interior_sample_variance_on_the_fine_grid(hyper):
    g = GridSpec.unit_square(128, 128)
    margin = 20
    squares = [sample_gmrf(g, hyper, seed).as_array()[margin:-margin, margin:-margin] ** 2 for seed in range(50)]
    assert np.mean(squares) == pytest.approx(hyper.sigma2, rel=0.15)


def pooled_correlation(samples, lag: int, margin: int) -> float:
    """Correlation of node pairs `lag` cells apart along either axis, pooled over samples and interior nodes."""
    products, left, right = 0.0, 0.0, 0.0
    for field in samples:
        inner = field[margin:-margin, margin:-margin]
        for a, b in ((inner[:, :inner.shape[1] - lag], inner[:, lag:]),
                     (inner[:inner.shape[0] - lag, :], inner[lag:, :])):
            products += float(np.sum(a * b))
            left += float(np.sum(a * a))
            right += float(np.sum(b * b))
    return products / math.sqrt(left * right)


@pytest.mark.slow
def test_sample_correlation_decays_with_distance(hyper):
    g = GridSpec.unit_square(64, 64)
    samples = [sample_gmrf(g, hyper, seed).as_array() for seed in range(50)]
    lags = [0, round(hyper.lengthscale / g.dx), round(3 * hyper.lengthscale / g.dx)]
    correlations = [pooled_correlation(samples, lag, margin=8) for lag in lags]
    assert correlations[0] == pytest.approx(1.0)
    assert correlations[0] > correlations[1] > correlations[2]
    expected = float(matern_covariance(lags[1] * g.dx, hyper)) / hyper.sigma2
    assert correlations[1] == pytest.approx(expected, abs=0.15)
