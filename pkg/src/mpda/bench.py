"""Timing harness.

:func:`run_method` dispatches one assimilation method and times the solver
call only; :func:`run_suite` sweeps it over grid sizes, observation densities
and seeds and reports every run plus the mean over seeds of every cell.
"""

import csv
import logging
import math
import time
from typing import IO, Iterable, NamedTuple, Optional, Sequence

import numpy as np
from sqlalchemy import Engine, select
from sqlalchemy.orm import Session

from . import mp
from .graph import ObservationSet, apply_observations, from_precision, prior_shift_from_mean
from .grid import GridSpec
from .models import CSV_COLUMNS, Base, BenchResult
from .multigrid import DEFAULT_BASE_MIN_DIM, build_hierarchy, prior_graph_builder, run_multigrid, serial_solver
from .operator import Hyperparams, build_precision
from .oracle import DENSE_LIMIT, Field, dense_posterior, make_synthetic, rmse
from .parallel import PartitionedSolver, partition, run_partitioned
from .utils import MPDAError
from .var3d import VarProblem, minimize

logger = logging.getLogger(__name__)

METHODS = ('mp', 'mp-multigrid', '3dvar', 'exact')


class MethodOutcome(NamedTuple):
    """Result of one timed method run.

    ``iterations`` is a list of per-level sweeps for multigrid and an
    integer otherwise; ``details`` holds method specific diagnostics.
    """

    method: str
    mean: np.ndarray
    status: str
    iterations: object
    wall_time: float
    details: dict

    @property
    def total_iterations(self) -> int:
        return sum(self.iterations) if isinstance(self.iterations, list) else int(self.iterations)

    @property
    def diverged(self) -> bool:
        return self.status == mp.Status.DIVERGED.value


def _trace(history: list) -> dict:
    return {'trace_length': len(history), 'final_delta': history[-1] if history else 0.0}


def run_method(method: str, grid: GridSpec, hyper: Hyperparams, obs: ObservationSet,
               prior_mean: Optional[np.ndarray] = None, base_min_dim: int = DEFAULT_BASE_MIN_DIM,
               px: int = 1, py: int = 1, exchange_period: int = 1, threads: Optional[int] = None,
               memory: int = 10, tol: float = 1e-3, max_iters: int = 500,
               dense_limit: int = DENSE_LIMIT) -> MethodOutcome:
    """Run `method` on the posterior of the prior of `hyper` given `obs`.

    Args:
        method: One of ``METHODS``.
        grid: Analysis grid.
        hyper: Prior and solver parameters.
        obs: Observations on `grid`.
        prior_mean: Background field, zero when omitted.
        base_min_dim: Coarsest multigrid level dimension.
        px, py, exchange_period, threads: Domain decomposition of the message passing runs.
        memory, tol, max_iters: L-BFGS settings of the 3D-Var run.
        dense_limit: Node limit of the exact method.

    Raises:
        MPDAError: For an unknown method.
    """
    if method not in METHODS:
        raise MPDAError(f"unknown method {method!r}, expected one of {', '.join(METHODS)}")
    details = {}
    if method == 'mp-multigrid':
        plan = build_hierarchy(grid, base_min_dim)
        builder = prior_graph_builder(hyper, grid, prior_mean)
        solver = PartitionedSolver(px, py, exchange_period, threads) if px * py > 1 else serial_solver
        start = time.perf_counter()
        result = run_multigrid(builder, obs, hyper, plan, solver)
        wall_time = time.perf_counter() - start
        details.update(levels=' '.join(f'{g.nx}x{g.ny}' for g in plan.levels),
                       **_trace(result.level_results[-1].history))
        if result.failed_level is not None:
            details['failed_level'] = result.failed_level
            details['reason'] = result.level_results[-1].reason
        return MethodOutcome(method, result.marginals.mean, result.status.value, result.iterations, wall_time,
                             details)

    P = build_precision(grid, hyper)
    if method == '3dvar':
        problem = VarProblem(P, np.zeros(grid.n) if prior_mean is None else prior_mean, obs)
        start = time.perf_counter()
        result = minimize(problem, None, memory, tol, max_iters)
        wall_time = time.perf_counter() - start
        details.update(final_cost=result.cost_history[-1], gradient_norm=result.gradient_norm,
                       memory=memory, tol=tol, max_iters=max_iters)
        return MethodOutcome(method, result.f_map, result.status.value, result.iterations, wall_time, details)

    shift = None if prior_mean is None else prior_shift_from_mean(P, prior_mean)
    graph = apply_observations(from_precision(P, shift), obs)
    if method == 'exact':
        start = time.perf_counter()
        mean = dense_posterior(graph, dense_limit).mean
        return MethodOutcome(method, mean, mp.Status.CONVERGED.value, 0, time.perf_counter() - start, details)

    if px * py > 1:
        part = partition(grid, graph, px, py)
        start = time.perf_counter()
        result = run_partitioned(graph, part, hyper, exchange_period, threads)
        wall_time = time.perf_counter() - start
        details.update(partition=f'{px}x{py}', exchange_period=exchange_period,
                       exchanges=result.stats.exchanges, crossing_directed_edges=result.stats.crossing_directed_edges,
                       reals_per_exchange=result.stats.reals_per_exchange, bytes_moved=result.stats.bytes_moved)
    else:
        start = time.perf_counter()
        result = mp.run(graph, hyper)
        wall_time = time.perf_counter() - start
    details.update(_trace(result.history))
    if result.reason:
        details['reason'] = result.reason
    return MethodOutcome(method, result.marginals.mean, result.status.value, result.iterations, wall_time, details)


def _finite_rmse(mean: np.ndarray, reference: Field) -> Optional[float]:
    if not np.all(np.isfinite(mean)):
        return None
    return rmse(Field(reference.grid, mean), reference)


def _aggregate(rows: list) -> BenchResult:
    first = rows[0]

    def mean_of(name):
        values = [getattr(row, name) for row in rows if getattr(row, name) is not None]
        return float(np.mean(values)) if values else None

    diverged = any(row.status == mp.Status.DIVERGED.value for row in rows)
    return BenchResult(method=first.method, nx=first.nx, ny=first.ny, density=first.density, seed=None,
                       aggregate=True, status=mp.Status.DIVERGED.value if diverged else first.status,
                       wall_time=mean_of('wall_time'), iterations=mean_of('iterations'),
                       rmse_truth=mean_of('rmse_truth'), rmse_oracle=mean_of('rmse_oracle'), threads=first.threads)


def run_suite(sizes: Sequence[int], densities: Sequence[float], methods: Sequence[str],
              seeds: Sequence[int] = (0, 1, 2), hyper: Optional[Hyperparams] = None,
              base_min_dim: int = DEFAULT_BASE_MIN_DIM, dense_limit: int = DENSE_LIMIT,
              threads: Optional[int] = None) -> list[BenchResult]:
    """Run every (size, density, method) cell on every seed.

    Square unit-square grids of side ``size`` are used. Each cell yields one
    row per seed followed by an aggregate row holding the means. Exact
    method cells beyond `dense_limit` nodes are skipped, diverged runs are
    recorded and the suite continues.
    """
    hyper = hyper or Hyperparams.synthetic_defaults()
    for method in methods:
        if method not in METHODS:
            raise MPDAError(f"unknown method {method!r}")
    rows = []
    for size in sizes:
        grid = GridSpec.unit_square(size, size)
        for density in densities:
            cells = {method: [] for method in methods}
            for seed in seeds:
                truth, obs = make_synthetic(grid, hyper, density, seed)
                oracle = None
                if grid.n <= dense_limit:
                    graph = apply_observations(from_precision(build_precision(grid, hyper)), obs)
                    oracle = Field(grid, dense_posterior(graph, dense_limit).mean)
                for method in methods:
                    if method == 'exact' and grid.n > dense_limit:
                        logger.warning("skipping exact method on %s (over %d nodes)", grid, dense_limit)
                        continue
                    outcome = run_method(method, grid, hyper, obs, base_min_dim=base_min_dim,
                                         threads=threads, dense_limit=dense_limit)
                    logger.info("bench %s %s density=%g seed=%d: %s in %.3fs", method, grid, density, seed,
                                outcome.status, outcome.wall_time)
                    cells[method].append(BenchResult(
                        method=method, nx=grid.nx, ny=grid.ny, density=density, seed=seed, aggregate=False,
                        status=outcome.status, wall_time=outcome.wall_time,
                        iterations=float(outcome.total_iterations),
                        rmse_truth=_finite_rmse(outcome.mean, truth),
                        rmse_oracle=None if oracle is None else _finite_rmse(outcome.mean, oracle),
                        threads=threads or 1))
            for method in methods:
                if cells[method]:
                    rows.extend(cells[method])
                    rows.append(_aggregate(cells[method]))
    return rows


def aggregates(rows: Iterable[BenchResult]) -> list[BenchResult]:
    return [row for row in rows if row.aggregate]


def write_csv(rows: Iterable[BenchResult], stream: IO[str]):
    """Comma-separated table with a header line."""
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_format_cell(value) for value in row.as_row()])


def _format_cell(value):
    if isinstance(value, float) and math.isfinite(value):
        return repr(value)
    return value


def save_results(engine: Engine, rows: Iterable[BenchResult]):
    """Persist rows, creating the result table when missing."""
    Base.metadata.create_all(engine)
    with Session(engine, expire_on_commit=False) as session:
        session.add_all(list(rows))
        session.commit()


def load_results(engine: Engine) -> list[BenchResult]:
    with Session(engine, expire_on_commit=False) as session:
        return list(session.scalars(select(BenchResult).order_by(BenchResult.id)))
