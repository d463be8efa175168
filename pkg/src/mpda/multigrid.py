"""Coarse-to-fine message passing.

The prior is rediscretized on every level (same physical hyperparameters,
doubled spacing), the observations that sit exactly on a level node are
injected, and message passing on each level starts from the converged
messages of the level below. Only the initialization changes: the finest
level converges to the same fixed point as a single-level run.
"""

import logging
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import mp
from .graph import FactorGraph, ObservationSet, apply_observations, from_precision, prior_shift_from_mean
from .grid import Boundary, GridSpec, GridSizeError, coarsen, node_coordinates, parent_indices
from .mp import MessageStore, MPResult, Status
from .operator import Hyperparams, build_precision
from .utils import MPDAError

logger = logging.getLogger(__name__)

DEFAULT_BASE_MIN_DIM = 32

GraphBuilder = Callable[[GridSpec], FactorGraph]
LevelSolver = Callable[[FactorGraph, GridSpec, Hyperparams, Optional[MessageStore]], MPResult]


def serial_solver(graph: FactorGraph, grid: GridSpec, hyper: Hyperparams,
                  init: Optional[MessageStore] = None) -> MPResult:
    """Single-process level solver."""
    return mp.run(graph, hyper, init)


class LevelMismatchError(MPDAError, ValueError):
    """Raised when two grids are not levels of the same hierarchy."""
    pass


class LevelPlan(NamedTuple):
    """Grids from coarsest to finest; the last one is the target."""

    levels: tuple
    base_min_dim: int = DEFAULT_BASE_MIN_DIM

    @property
    def finest(self) -> GridSpec:
        return self.levels[-1]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


class MultigridResult(NamedTuple):
    marginals: mp.Marginals
    iterations: list
    status: Status
    level_results: list
    failed_level: Optional[int] = None


def _min_dim(g: GridSpec) -> int:
    return min(size for size in (g.nx, g.ny) if size > 1)


def build_hierarchy(target: GridSpec, base_min_dim: int = DEFAULT_BASE_MIN_DIM,
                    max_levels: Optional[int] = None) -> LevelPlan:
    """Coarsen `target` while the smaller dimension stays at least `base_min_dim`.

    Args:
        target: Finest grid.
        base_min_dim: Smallest dimension allowed on the coarsest level.
        max_levels: Optional cap on the number of levels.
    """
    levels = [target]
    while max_levels is None or len(levels) < max_levels:
        try:
            coarse = coarsen(levels[0])
        except GridSizeError:
            break
        if _min_dim(coarse) < base_min_dim:
            break
        levels.insert(0, coarse)
    return LevelPlan(tuple(levels), base_min_dim)


def _edge_slots(graph: FactorGraph, n: int, sender: np.ndarray, receiver: np.ndarray) -> np.ndarray:
    """Slot of every directed edge ``sender -> receiver`` of `graph`, -1 where there is none."""
    keys = graph.source * n + graph.indices
    wanted = sender * n + receiver
    position = np.minimum(np.searchsorted(keys, wanted), len(keys) - 1)
    return np.where((keys[position] == wanted) & (sender != receiver), position, -1)


def _signed(delta: np.ndarray, size: int) -> np.ndarray:
    return (delta + size // 2) % size - size // 2


def _same_offset_slots(coarse_graph: FactorGraph, coarse_grid: GridSpec, fine_graph: FactorGraph,
                       fine_grid: GridSpec, parents: np.ndarray) -> np.ndarray:
    """Coarse edge leaving the parent of each fine sender with the fine edge's lattice offset."""
    periodic = fine_grid.boundary is Boundary.PERIODIC
    i, j = node_coordinates(fine_grid)
    src, dst = fine_graph.source, fine_graph.indices
    di, dj = i[dst] - i[src], j[dst] - j[src]
    if periodic:
        di, dj = _signed(di, fine_grid.nx), _signed(dj, fine_grid.ny)
    ci, cj = node_coordinates(coarse_grid)
    sender = parents[src]
    ti, tj = ci[sender] + di, cj[sender] + dj
    if periodic:
        ti, tj = ti % coarse_grid.nx, tj % coarse_grid.ny
        inside = np.ones(len(src), dtype=bool)
    else:
        inside = (ti >= 0) & (ti < coarse_grid.nx) & (tj >= 0) & (tj < coarse_grid.ny)
    receiver = np.where(inside, tj * coarse_grid.nx + ti, sender)
    return _edge_slots(coarse_graph, coarse_grid.n, sender, receiver)


def upscale_messages(coarse_graph: FactorGraph, coarse: MessageStore, coarse_grid: GridSpec,
                     fine_graph: FactorGraph, fine_grid: GridSpec, rescale: bool = False) -> MessageStore:
    """Initial fine-level messages copied from the coarse level.

    A fine edge takes the message of the coarse edge joining the parents
    ``(i // 2, j // 2)`` of its endpoints when those parents are distinct and
    adjacent; every other fine edge gets the default initial message.

    With `rescale` a fine edge first looks for the coarse edge that leaves
    the parent of its sender with the same lattice offset, falling back to
    the parent rule above. The copied message is mapped to the fine stencil:
    ``b`` is multiplied by the ratio ``r`` of the fine to the coarse edge
    weight and ``a`` by ``r**2`` times the ratio of the coarse to the fine
    sender precision, so that the fine marginals start out close to the
    coarse ones.

    Raises:
        LevelMismatchError: If the grids or stores do not belong together.
    """
    try:
        parents = parent_indices(fine_grid, coarse_grid)
    except GridSizeError as exc:
        raise LevelMismatchError(str(exc)) from exc
    if coarse_graph.n != coarse_grid.n or fine_graph.n != fine_grid.n or not coarse.matches(coarse_graph):
        raise LevelMismatchError("graphs or message store do not match their grids")
    store = MessageStore.default(fine_graph)
    if coarse_graph.num_directed == 0 or fine_graph.num_directed == 0:
        return store
    slots = _edge_slots(coarse_graph, coarse_grid.n, parents[fine_graph.source], parents[fine_graph.indices])
    if rescale:
        same_offset = _same_offset_slots(coarse_graph, coarse_grid, fine_graph, fine_grid, parents)
        slots = np.where(same_offset >= 0, same_offset, slots)
    matched = np.flatnonzero(slots >= 0)
    source = slots[matched]
    store.a[matched] = coarse.a[source]
    store.b[matched] = coarse.b[source]
    if rescale:
        ratio = fine_graph.weights[matched] / coarse_graph.weights[source]
        sender = fine_graph.source[matched]
        precision_ratio = coarse_graph.node_precision[parents[sender]] / fine_graph.node_precision[sender]
        store.a[matched] *= ratio ** 2 * precision_ratio
        store.b[matched] *= ratio
    logger.debug("upscaled %d of %d fine messages from %s", len(matched), fine_graph.num_directed, coarse_grid)
    return store


def level_depth(finest: GridSpec, level: GridSpec) -> int:
    """Number of coarsenings leading from `finest` to `level`."""
    depth, current = 0, finest
    while current != level:
        try:
            current = coarsen(current)
        except GridSizeError as exc:
            raise LevelMismatchError(f"{level} is not a level of {finest}") from exc
        depth += 1
    return depth


def restrict_observations(obs: ObservationSet, finest: GridSpec, level: GridSpec) -> ObservationSet:
    """Observations whose finest-grid node coincides with a node of `level`, re-indexed."""
    depth = level_depth(finest, level)
    if depth == 0:
        return obs
    step = 2 ** depth
    i, j = node_coordinates(finest)
    i, j = i[obs.index], j[obs.index]
    stride_x = step if finest.nx > 1 else 1
    stride_y = step if finest.ny > 1 else 1
    keep = (i % stride_x == 0) & (j % stride_y == 0)
    index = (j[keep] // stride_y) * level.nx + i[keep] // stride_x
    return ObservationSet(index, obs.value[keep], obs.variance[keep])


def subsample(values: np.ndarray, finest: GridSpec, level: GridSpec) -> np.ndarray:
    """Values of a finest-grid field at the nodes of `level`."""
    step = 2 ** level_depth(finest, level)
    field = np.asarray(values).reshape(finest.shape)
    return field[::step if finest.ny > 1 else 1, ::step if finest.nx > 1 else 1].reshape(-1)


def prior_graph_builder(hyper: Hyperparams, finest: Optional[GridSpec] = None,
                        prior_mean: Optional[np.ndarray] = None) -> GraphBuilder:
    """Builder of the prior factor graph on any level grid.

    Args:
        hyper: Physical hyperparameters shared by every level.
        finest: Grid on which `prior_mean` is given.
        prior_mean: Optional prior mean on `finest`; subsampled on coarse levels.
    """
    def build(grid: GridSpec) -> FactorGraph:
        P = build_precision(grid, hyper)
        shift = None
        if prior_mean is not None:
            shift = prior_shift_from_mean(P, subsample(prior_mean, finest, grid))
        return from_precision(P, shift)

    return build


def run_multigrid(build_graph: GraphBuilder, obs: ObservationSet, hyper: Hyperparams, plan: LevelPlan,
                  solver: LevelSolver = serial_solver, rescale: bool = True) -> MultigridResult:
    """Message passing over every level of `plan`, coarsest first.

    Args:
        build_graph: Prior factor graph of a level grid.
        obs: Observations on the finest grid.
        hyper: Hyperparameters (physical prior parameters are level independent).
        plan: Level hierarchy.
        solver: Within-level solver, :func:`serial_solver` or a
            :class:`mpda.parallel.PartitionedSolver`.
        rescale: Map upscaled messages to the fine stencil, see :func:`upscale_messages`.

    A divergent level stops the hierarchy; the result then carries NaN
    marginals of the finest grid size and the index of the failed level.
    """
    iterations, results = [], []
    previous = None
    for depth, grid in enumerate(plan.levels):
        logger.info("multigrid level %d/%d: %s", depth + 1, plan.num_levels, grid)
        graph = apply_observations(build_graph(grid), restrict_observations(obs, plan.finest, grid))
        init = None
        if previous is not None:
            init = upscale_messages(previous[0], previous[1], previous[2], graph, grid, rescale)
        result = solver(graph, grid, hyper, init)
        iterations.append(result.iterations)
        results.append(result)
        if result.status is Status.DIVERGED:
            logger.warning("multigrid diverged on level %d (%s): %s", depth + 1, grid, result.reason)
            undefined = np.full(plan.finest.n, np.nan)
            return MultigridResult(mp.Marginals(undefined, undefined.copy()), iterations, Status.DIVERGED, results,
                                   depth)
        previous = (graph, result.messages, grid)
    final = results[-1]
    return MultigridResult(final.marginals, iterations, final.status, results)
