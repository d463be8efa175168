"""Domain-decomposed message passing on worker threads.

The grid is cut into ``px`` by ``py`` rectangular subdomains. A worker owns the
messages sent by the nodes of its subdomain and keeps them in a private
buffer together with a mailbox copy of the messages its boundary nodes
receive from other subdomains. Mailboxes are refreshed every
``exchange_period`` sweeps; in between, workers sweep on stale halo values.
With an exchange after every sweep the run reproduces the serial engine.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import mp
from .graph import FactorGraph
from .grid import GridSpec, node_coordinates
from .mp import MessageStore, Marginals, SweepKernel, Status
from .operator import Hyperparams
from .utils import MPDAError

logger = logging.getLogger(__name__)

BYTES_PER_REAL = 8


class PartitionError(MPDAError, ValueError):
    """Raised for subdomain counts that do not fit the grid or graph."""
    pass


@dataclass(frozen=True)
class Partition:
    """Block decomposition of a grid into ``px * py`` subdomains.

    Subdomain ``s = by * px + bx`` covers the x block ``bx`` and y block
    ``by``. ``halo_edges[(s, t)]`` lists the slots of the directed edges
    sent from subdomain ``s`` into subdomain ``t``.
    """

    grid: GridSpec
    px: int
    py: int
    ownership: np.ndarray
    halo_edges: dict = field(repr=False)

    @property
    def num_subdomains(self) -> int:
        return self.px * self.py

    @property
    def num_crossing_directed(self) -> int:
        return sum(len(slots) for slots in self.halo_edges.values())

    @property
    def num_crossing_edges(self) -> int:
        return self.num_crossing_directed // 2

    def nodes(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.ownership == s)

    def block_shape(self, s: int) -> tuple[int, int]:
        """``(width, height)`` of subdomain `s`."""
        i, j = node_coordinates(self.grid)
        mine = self.ownership == s
        return len(np.unique(i[mine])), len(np.unique(j[mine]))


class TrafficStats(NamedTuple):
    sweeps: int
    exchanges: int
    crossing_directed_edges: int
    reals_per_exchange: int
    bytes_moved: int
    subdomain_sweeps: tuple


class PartitionedResult(NamedTuple):
    marginals: Marginals
    iterations: int
    status: Status
    messages: MessageStore
    history: list
    stats: TrafficStats
    reason: str = ''


def _blocks(size: int, count: int) -> np.ndarray:
    """Block id of every coordinate, block sizes differing by at most one."""
    owner = np.empty(size, dtype=np.int64)
    for block, members in enumerate(np.array_split(np.arange(size), count)):
        owner[members] = block
    return owner


def partition(g: GridSpec, graph: FactorGraph, px: int, py: int) -> Partition:
    """Split `g` into ``px`` by ``py`` blocks and enumerate the crossing edges.

    Raises:
        PartitionError: If a count is not in ``[1, nx]`` / ``[1, ny]`` or the
            graph does not live on `g`.
    """
    if not (1 <= px <= g.nx and 1 <= py <= g.ny):
        raise PartitionError(f"cannot split grid {g.nx}x{g.ny} into {px}x{py} subdomains")
    if graph.n != g.n:
        raise PartitionError(f"graph of {graph.n} nodes on grid {g}")
    i, j = node_coordinates(g)
    ownership = _blocks(g.ny, py)[j] * px + _blocks(g.nx, px)[i]
    sender = ownership[graph.source]
    receiver = ownership[graph.indices]
    halo = {}
    for e in np.flatnonzero(sender != receiver):
        halo.setdefault((int(sender[e]), int(receiver[e])), []).append(e)
    halo = {pair: np.asarray(slots, dtype=np.int64) for pair, slots in sorted(halo.items())}
    return Partition(g, px, py, ownership, halo)


class _Subdomain:
    """Worker state: own messages plus the mailbox of received halo messages."""

    def __init__(self, graph: FactorGraph, part: Partition, s: int, c: float, store: MessageStore):
        own = np.flatnonzero(part.ownership[graph.source] == s)
        self.kernel = SweepKernel(graph, c, own)
        self.buffer_slots = self.kernel.localize()
        self.own = self.kernel.slots
        self.own_global = own
        self.halo = np.flatnonzero(part.ownership[graph.source[self.buffer_slots]] != s)
        self.halo_global = self.buffer_slots[self.halo]
        self.a = store.a[self.buffer_slots].copy()
        self.b = store.b[self.buffer_slots].copy()
        self.sweeps = 0

    def step(self, eta: float, a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
        """Sweep the own slots and publish them into the shared arrays."""
        new_a, new_b, change, singular = self.kernel.update(self.a, self.b, eta)
        self.a[self.own] = new_a
        self.b[self.own] = new_b
        a[self.own_global] = new_a
        b[self.own_global] = new_b
        self.sweeps += 1
        return change, singular

    def receive(self, a: np.ndarray, b: np.ndarray):
        self.a[self.halo] = a[self.halo_global]
        self.b[self.halo] = b[self.halo_global]


def run_partitioned(graph: FactorGraph, part: Partition, hyper: Hyperparams, exchange_period: int = 1,
                    threads: Optional[int] = None, init: Optional[MessageStore] = None) -> PartitionedResult:
    """Message passing with one worker per subdomain.

    The global early-stop test uses the mean absolute change over all
    slots, i.e. the edge-count weighted mean of the subdomain changes. With
    ``exchange_period > 1`` it is only evaluated on the first sweep after an
    exchange. A divergent subdomain makes the whole run diverge.

    Args:
        graph: Posterior factor graph on ``part.grid``.
        part: Subdomain decomposition of the graph.
        hyper: Solver parameters.
        exchange_period: Sweeps between two halo exchanges.
        threads: Worker threads, one per subdomain up to the CPU count by default.
        init: Initial messages, the default store when omitted.
    """
    if exchange_period < 1:
        raise PartitionError(f"exchange period must be at least 1, got {exchange_period}")
    if graph.n != part.grid.n:
        raise PartitionError(f"graph of {graph.n} nodes for a partition of {part.grid}")
    store = MessageStore.default(graph) if init is None else init.copy()
    reals = 2 * part.num_crossing_directed
    if part.num_subdomains == 1:
        result = mp.run(graph, hyper, store)
        stats = TrafficStats(result.iterations, 0, 0, 0, 0, (result.iterations,))
        return PartitionedResult(result.marginals, result.iterations, result.status, result.messages,
                                 result.history, stats, result.reason)

    workers = [_Subdomain(graph, part, s, hyper.c, store) for s in range(part.num_subdomains)]
    a, b = store.a, store.b
    slots = max(graph.num_directed, 1)
    history, reference = [], None
    status, reason = Status.MAX_ITERS, ''
    exchanges, iteration = 0, 0
    max_workers = threads or min(part.num_subdomains, os.cpu_count() or 1)
    logger.debug("partitioned run: %dx%d subdomains, %d crossing edges, period %d, %d threads",
                 part.px, part.py, part.num_crossing_edges, exchange_period, max_workers)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        for iteration in range(1, hyper.T + 1):
            outcomes = list(executor.map(lambda w: w.step(hyper.eta, a, b), workers))
            delta = sum(change for change, _ in outcomes) / (2 * slots)
            history.append(delta)
            marginals = mp.compute_marginals(graph, MessageStore(a, b), hyper.c)
            reason = mp.divergence_reason(a, b, any(singular for _, singular in outcomes), marginals)
            if reason:
                status = Status.DIVERGED
                break
            if iteration == 2:
                reference = delta
            if mp.is_growing(reference, delta):
                status, reason = Status.DIVERGED, 'messages growing'
                break
            fresh = (iteration - 1) % exchange_period == 0
            if reference is not None and fresh and mp.early_stop(reference, delta, hyper.tau):
                status = Status.CONVERGED
                break
            if iteration % exchange_period == 0:
                list(executor.map(lambda w: w.receive(a, b), workers))
                exchanges += 1
    store = MessageStore(a, b)
    marginals = mp.compute_marginals(graph, store, hyper.c)
    if status is not Status.DIVERGED and not marginals.is_valid():
        status, reason = Status.DIVERGED, 'non-positive marginal precision'
    stats = TrafficStats(iteration, exchanges, part.num_crossing_directed, reals,
                         BYTES_PER_REAL * reals * exchanges, tuple(w.sweeps for w in workers))
    if status is Status.DIVERGED:
        logger.warning("partitioned run diverged after %d sweeps: %s", iteration, reason)
    logger.info("partitioned run %s after %d sweeps, %d exchanges, %d bytes", status.value, iteration,
                exchanges, stats.bytes_moved)
    return PartitionedResult(marginals, iteration, status, store, history, stats, reason)


class PartitionedSolver:
    """Multigrid level solver running every level on a partition.

    Subdomain counts are clipped to the level grid dimensions.
    """

    def __init__(self, px: int, py: int, exchange_period: int = 1, threads: Optional[int] = None):
        self.px = px
        self.py = py
        self.exchange_period = exchange_period
        self.threads = threads

    def __call__(self, graph: FactorGraph, grid: GridSpec, hyper: Hyperparams,
                 init: Optional[MessageStore] = None) -> PartitionedResult:
        part = partition(grid, graph, min(self.px, grid.nx), min(self.py, grid.ny))
        return run_partitioned(graph, part, hyper, self.exchange_period, self.threads, init)
