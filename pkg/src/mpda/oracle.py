"""Ground truth machinery.

Exact dense posteriors for small problems, GMRF prior samples, synthetic
experiments and the error metrics used to compare estimates against them.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .graph import FactorGraph, ObservationSet
from .grid import Boundary, GridSpec, node_coordinates
from .operator import Hyperparams, ParameterError, build_shift_operator, operator_power
from .utils import MPDAError, Stream, rng

logger = logging.getLogger(__name__)

DENSE_LIMIT = 4096
CG_TOLERANCE = 1e-8


class DenseLimitError(MPDAError, ValueError):
    """Raised when a dense solve is requested for too many nodes."""
    pass


class NotSPDError(MPDAError, ArithmeticError):
    """Raised when the Cholesky factorization of a posterior precision fails."""
    pass


class SolverError(MPDAError, ArithmeticError):
    """Raised when the sampling solve does not converge."""
    pass


class GridMismatchError(MPDAError, ValueError):
    """Raised when two fields do not live on the same grid."""
    pass


class FieldError(MPDAError, ValueError):
    """Raised for field values that are non-finite or do not fit their grid."""
    pass


class WeightError(MPDAError, ValueError):
    """Raised for negative or all-zero metric weights."""
    pass


@dataclass(frozen=True)
class Field:
    """Values of a scalar field on every node of a grid, in linear index order."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(values) != self.grid.n:
            raise FieldError(f"{len(values)} values for grid {self.grid}")
        if not np.all(np.isfinite(values)):
            raise FieldError("field values must be finite")
        object.__setattr__(self, 'values', values)

    @classmethod
    def constant(cls, grid: GridSpec, value: float = 0.0) -> "Field":
        return cls(grid, np.full(grid.n, float(value)))

    def as_array(self) -> np.ndarray:
        """Values reshaped to ``(ny, nx)``."""
        return self.values.reshape(self.grid.shape)

    def __len__(self):
        return self.grid.n


class DensePosterior(NamedTuple):
    mean: np.ndarray
    variance: Optional[np.ndarray] = None


def dense_posterior(graph: FactorGraph, limit: int = DENSE_LIMIT, with_variance: bool = False) -> DensePosterior:
    """Exact posterior of a factor graph by dense Cholesky factorization.

    Args:
        graph: Posterior factor graph (prior with observations applied).
        limit: Largest node count accepted.
        with_variance: Also return the diagonal of the inverse precision.

    Raises:
        DenseLimitError: If the graph has more than `limit` nodes.
        NotSPDError: If the precision is not positive definite.
    """
    if graph.n > limit:
        raise DenseLimitError(f"dense solve of {graph.n} nodes exceeds the limit of {limit}")
    P, h = graph.to_dense()
    try:
        factor = scipy.linalg.cho_factor(P, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(f"posterior precision is not positive definite: {exc}") from exc
    mean = scipy.linalg.cho_solve(factor, h)
    variance = None
    if with_variance:
        variance = np.diag(scipy.linalg.cho_solve(factor, np.eye(graph.n))).copy()
    return DensePosterior(mean, variance)


def dense_posterior_mean(graph: FactorGraph, grid: Optional[GridSpec] = None, limit: int = DENSE_LIMIT) -> Field:
    """Exact posterior mean as a field; on an ``n x 1`` line when no grid is given."""
    grid = GridSpec(graph.n, 1) if grid is None else grid
    if grid.n != graph.n:
        raise GridMismatchError(f"graph of {graph.n} nodes on grid {grid}")
    return Field(grid, dense_posterior(graph, limit).mean)


def sample_gmrf(g: GridSpec, h: Hyperparams, seed: int) -> Field:
    """Draw a prior sample by solving ``L^(alpha/2) f = sqrt(sigma^2 q / (dx dy)) z``.

    The solve uses conjugate gradients with a Jacobi preconditioner and
    relative tolerance 1e-8; `z` comes from the field stream of `seed`.

    Raises:
        ParameterError: If the grid is not Dirichlet.
        SolverError: If CG does not converge within ``10 n`` iterations.
    """
    if g.boundary is not Boundary.DIRICHLET:
        raise ParameterError("prior sampling needs a Dirichlet grid")
    root = operator_power(build_shift_operator(g, h.kappa), h.alpha // 2).matrix
    z = rng(seed, Stream.FIELD).standard_normal(g.n)
    rhs = math.sqrt(h.sigma2 * h.q / g.cell_area) * z
    preconditioner = sp.diags(1.0 / root.diagonal())
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    f, info = cg(root, rhs, rtol=CG_TOLERANCE, maxiter=10 * g.n, M=preconditioner, callback=count)
    if info != 0:
        raise SolverError(f"CG did not converge on grid {g} (info={info})")
    logger.debug("prior sample on %s: %d CG iterations", g, iterations)
    return Field(g, f)


def observe(truth: Field, index, h: Hyperparams, seed: int) -> ObservationSet:
    """Noisy observations of `truth` at `index`, noise drawn from the noise stream of `seed`."""
    index = np.asarray(index, dtype=np.int64)
    noise = rng(seed, Stream.NOISE).standard_normal(len(index)) * math.sqrt(h.sigma_y2)
    return ObservationSet(index, truth.values[index] + noise, np.full(len(index), h.sigma_y2))


def make_synthetic(g: GridSpec, h: Hyperparams, density: float, seed: int) -> tuple[Field, ObservationSet]:
    """Prior sample plus ``floor(density * n)`` distinct noisy point observations of it.

    The observed nodes are drawn uniformly without replacement and sorted.
    """
    if not 0 < density <= 1:
        raise ParameterError(f"density must lie in (0, 1], got {density}")
    truth = sample_gmrf(g, h, seed)
    count = math.floor(density * g.n)
    index = np.sort(rng(seed, Stream.SELECTION).choice(g.n, size=count, replace=False))
    return truth, observe(truth, index, h, seed)


def track_nodes(g: GridSpec, n_tracks: int, width: float, seed: int) -> np.ndarray:
    """Sorted nodes covered by `n_tracks` slanted swaths of `width` nodes.

    Every track crosses the grid from bottom to top with a random offset and
    slope, wrapping around in x.
    """
    if n_tracks < 1 or width <= 0:
        raise ParameterError("tracks need n_tracks >= 1 and a positive width")
    generator = rng(seed, Stream.SELECTION)
    i, j = node_coordinates(g)
    covered = np.zeros(g.n, dtype=bool)
    for _ in range(n_tracks):
        offset = generator.uniform(0, g.nx)
        slope = generator.uniform(0.2, 1.0) * generator.choice((-1.0, 1.0))
        centre = (offset + slope * j) % g.nx
        distance = np.abs(i - centre)
        distance = np.minimum(distance, g.nx - distance)
        covered |= distance < width / 2
    return np.flatnonzero(covered)


def latitude_weights(g: GridSpec, lat_min: float = -90.0, lat_max: float = 90.0) -> Field:
    """Cosine-latitude area weights, rows spanning ``[lat_min, lat_max]`` at cell centres."""
    if not -90 <= lat_min < lat_max <= 90:
        raise ParameterError(f"invalid latitude band [{lat_min}, {lat_max}]")
    latitude = lat_min + (np.arange(g.ny) + 0.5) * (lat_max - lat_min) / g.ny
    weights = np.repeat(np.cos(np.radians(latitude)), g.nx)
    return Field(g, np.clip(weights, 0.0, None))


def _check_same_grid(a: Field, b: Field):
    if a.grid != b.grid:
        raise GridMismatchError(f"fields on different grids: {a.grid} and {b.grid}")


def rmse(estimate: Field, truth: Field, weights: Optional[Field] = None) -> float:
    """Weighted root-mean-square error, uniform weights when none are given.

    Raises:
        GridMismatchError: If the fields do not share a grid.
        WeightError: If a weight is negative or they are all zero.
    """
    _check_same_grid(estimate, truth)
    squared = (estimate.values - truth.values) ** 2
    if weights is None:
        return float(np.sqrt(np.mean(squared)))
    _check_same_grid(estimate, weights)
    w = weights.values
    if np.any(w < 0) or not np.any(w > 0):
        raise WeightError("weights must be non-negative and not all zero")
    return float(np.sqrt(np.sum(w * squared) / np.sum(w)))


def l1_error_field(estimate: Field, truth: Field) -> Field:
    """Pointwise absolute error."""
    _check_same_grid(estimate, truth)
    return Field(estimate.grid, np.abs(estimate.values - truth.values))
