"""Re-weighted, damped Gaussian message passing.

Every directed edge ``i -> j`` carries a message ``(a, b)`` standing for the
fractional potential ``exp(-1/2 a f_j^2 + b f_j)``. Node ``i`` sends to ``j``

    alpha = P_ii + c * sum_{k ~ i, k != j} a_ki + (c - 1) * a_ji
    beta  = -h_i - c * sum_{k ~ i, k != j} b_ki - (c - 1) * b_ji
    a'    = -(P_ij / c)^2 / alpha
    b'    = beta * (P_ij / c) / alpha

and the marginal of node ``i`` has precision ``P_ii + c * sum_k a_ki`` and
mean ``(h_i + c * sum_k b_ki) / precision``. With ``c = 1`` this is plain
Gaussian belief propagation; at any fixed point the means are exact.

Sweeps are simultaneous (Jacobi): each sweep reads only the previous store,
so the order in which nodes are visited never matters.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .graph import FactorGraph
from .operator import Hyperparams
from .utils import MPDAError

logger = logging.getLogger(__name__)

INITIAL_B = 1e-8
DIVERGENCE_THRESHOLD = 1e8
GROWTH_LIMIT = 1e3


class SingularUpdateError(MPDAError, ArithmeticError):
    """Raised when an outgoing message would divide by a zero ``alpha``."""
    pass


class Status(str, Enum):
    CONVERGED = 'converged'
    MAX_ITERS = 'max_iters'
    DIVERGED = 'diverged'


class Message(NamedTuple):
    """Quadratic and linear coefficient of a message."""

    a: float
    b: float


@dataclass
class MessageStore:
    """One message per directed edge of a factor graph.

    Slots follow the graph CSR layout: the slots of row ``i`` hold the
    messages sent by ``i`` to its neighbors, sorted by neighbor index (on a
    row-major grid that is the stencil offset order).
    """

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def default(cls, graph: FactorGraph) -> "MessageStore":
        """Initial store, ``(0, 1e-8)`` on every edge."""
        return cls(np.zeros(graph.num_directed), np.full(graph.num_directed, INITIAL_B))

    def __len__(self):
        return len(self.a)

    def copy(self) -> "MessageStore":
        return MessageStore(self.a.copy(), self.b.copy())

    def matches(self, graph: FactorGraph) -> bool:
        return len(self.a) == len(self.b) == graph.num_directed

    def get(self, graph: FactorGraph, i: int, j: int) -> Message:
        """Message sent by node `i` to node `j`."""
        e = slot_of(graph, i, j)
        return Message(float(self.a[e]), float(self.b[e]))


def slot_of(graph: FactorGraph, i: int, j: int) -> int:
    """Slot of the directed edge ``i -> j``.

    Raises:
        KeyError: If the two nodes are not adjacent.
    """
    start, stop = graph.indptr[i], graph.indptr[i + 1]
    e = start + int(np.searchsorted(graph.indices[start:stop], j))
    if e >= stop or graph.indices[e] != j:
        raise KeyError(f"no edge {i} -> {j}")
    return e


@dataclass
class Marginals:
    """Posterior marginal means and precisions.

    The means are exact at a converged fixed point; the precisions (and the
    variances derived from them) are biased estimates and flagged as such.
    """

    mean: np.ndarray
    precision: np.ndarray
    biased_variance_flag: bool = True

    @property
    def variance(self) -> np.ndarray:
        return 1.0 / self.precision

    def is_valid(self) -> bool:
        return bool(np.all(self.precision > 0) and np.all(np.isfinite(self.mean)))


class MPResult(NamedTuple):
    marginals: Marginals
    iterations: int
    status: Status
    messages: MessageStore
    history: list
    reason: str = ''


def compute_outgoing_message(c: float, node_precision: float, node_shift: float,
                             incoming: Sequence[tuple[float, Message]], excluded: Message,
                             weight: float) -> Message:
    """Message sent by a node to one neighbor.

    Args:
        c: Re-weighting constant.
        node_precision: ``P_ii`` of the sending node.
        node_shift: ``h_i`` of the sending node.
        incoming: ``(P_ki, m_ki)`` for every other neighbor ``k``.
        excluded: Message ``m_ji`` received from the target neighbor.
        weight: ``P_ij`` of the edge to the target.

    Raises:
        SingularUpdateError: If ``alpha`` vanishes.
    """
    sum_a = sum(m.a for _, m in incoming)
    sum_b = sum(m.b for _, m in incoming)
    alpha = node_precision + c * sum_a + (c - 1) * excluded.a
    beta = -node_shift - c * sum_b - (c - 1) * excluded.b
    if alpha == 0:
        raise SingularUpdateError("alpha vanished in an outgoing message")
    w = weight / c
    return Message(-w * w / alpha, beta * w / alpha)


def damped_update(old: Message, new: Message, eta: float) -> Message:
    """``(1 - eta) * old + eta * new``, componentwise."""
    return Message((1 - eta) * old.a + eta * new.a, (1 - eta) * old.b + eta * new.b)


class SweepKernel:
    """Vectorized update of a set of slots.

    The slots must be sorted; node sums are accumulated in slot order, so any
    partition of the slots reproduces the serial sums bit for bit.
    """

    def __init__(self, graph: FactorGraph, c: float, slots: Optional[np.ndarray] = None):
        self.slots = np.arange(graph.num_directed) if slots is None else np.asarray(slots, dtype=np.int64)
        source = graph.source[self.slots]
        self.nodes, self.local_source = np.unique(source, return_inverse=True)
        self.reverse = graph.reverse[self.slots]
        self.precision = graph.node_precision[source]
        self.shift = graph.node_shift[source]
        self.w = graph.weights[self.slots] / c
        self.c = c

    def localize(self) -> np.ndarray:
        """Rebase the kernel onto a compact buffer.

        Returns:
            np.ndarray: The sorted global slots the buffer holds, the kernel
            slots and the slots they read. Afterwards :meth:`update` expects
            arrays laid out over these slots instead of the full store.
        """
        buffer_slots = np.union1d(self.slots, self.reverse)
        self.slots = np.searchsorted(buffer_slots, self.slots)
        self.reverse = np.searchsorted(buffer_slots, self.reverse)
        return buffer_slots

    def update(self, a: np.ndarray, b: np.ndarray, eta: float):
        """Damped new values of the kernel slots.

        Returns:
            tuple: ``(new_a, new_b, abs_change_sum, singular)`` where the
            change sum adds both components over the kernel slots.
        """
        received_a = a[self.reverse]
        received_b = b[self.reverse]
        sum_a = np.bincount(self.local_source, weights=received_a, minlength=len(self.nodes))
        sum_b = np.bincount(self.local_source, weights=received_b, minlength=len(self.nodes))
        alpha = self.precision + self.c * sum_a[self.local_source] - received_a
        beta = -self.shift - self.c * sum_b[self.local_source] + received_b
        singular = not np.all(alpha != 0)
        with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
            out_a = -self.w * self.w / alpha
            out_b = beta * self.w / alpha
            old_a = a[self.slots]
            old_b = b[self.slots]
            new_a = (1 - eta) * old_a + eta * out_a
            new_b = (1 - eta) * old_b + eta * out_b
            change = float(np.sum(np.abs(new_a - old_a)) + np.sum(np.abs(new_b - old_b)))
        return new_a, new_b, change, singular


def sweep(graph: FactorGraph, msgs: MessageStore, hyper: Hyperparams) -> tuple[MessageStore, float]:
    """One simultaneous damped update of every directed edge.

    Returns:
        tuple: The new store and the mean absolute change over all slots and
        both components, measured on the stored (damped) values.

    Raises:
        SingularUpdateError: If some ``alpha`` vanishes.
    """
    if graph.num_directed == 0:
        return msgs.copy(), 0.0
    new_a, new_b, change, singular = SweepKernel(graph, hyper.c).update(msgs.a, msgs.b, hyper.eta)
    if singular:
        raise SingularUpdateError("alpha vanished during the sweep")
    return MessageStore(new_a, new_b), change / (2 * graph.num_directed)


def early_stop(reference_delta: float, current_delta: float, tau: float) -> bool:
    """Stop once the change falls below ``tau`` times the change between sweeps 1 and 2.

    A zero reference means the messages were already stationary.
    """
    if reference_delta == 0:
        return True
    return current_delta < tau * reference_delta


def is_growing(reference_delta: Optional[float], current_delta: float, limit: float = GROWTH_LIMIT) -> bool:
    """True once the change exceeds `limit` times the change between sweeps 1 and 2."""
    return reference_delta is not None and reference_delta > 0 and current_delta > limit * reference_delta


def compute_marginals(graph: FactorGraph, msgs: MessageStore, c: float) -> Marginals:
    """Marginal means and (biased) precisions from the messages."""
    received_a = np.bincount(graph.source, weights=msgs.a[graph.reverse], minlength=graph.n)
    received_b = np.bincount(graph.source, weights=msgs.b[graph.reverse], minlength=graph.n)
    precision = graph.node_precision + c * received_a
    with np.errstate(divide='ignore', invalid='ignore'):
        mean = (graph.node_shift + c * received_b) / precision
    return Marginals(mean, precision)


def divergence_reason(new_a: np.ndarray, new_b: np.ndarray, singular: bool, marginals: Marginals) -> str:
    """Why an iterate is considered divergent, or an empty string."""
    if singular:
        return 'singular update'
    if not (np.all(np.isfinite(new_a)) and np.all(np.isfinite(new_b))):
        return 'non-finite message'
    if not np.all(np.abs(marginals.mean) <= DIVERGENCE_THRESHOLD):
        return 'mean magnitude above threshold'
    return ''


def run(graph: FactorGraph, hyper: Hyperparams, init: Optional[MessageStore] = None) -> MPResult:
    """Iterate damped sweeps until early stop, divergence or ``hyper.T`` sweeps.

    Divergence is reported through the status, never raised.
    """
    store = MessageStore.default(graph) if init is None else init.copy()
    if not store.matches(graph):
        raise ValueError(f"message store of {len(store)} slots for a graph of {graph.num_directed} directed edges")
    logger.debug("message passing on %d nodes, %d directed edges (c=%g, eta=%g, tau=%g, T=%d)",
                 graph.n, graph.num_directed, hyper.c, hyper.eta, hyper.tau, hyper.T)
    kernel = SweepKernel(graph, hyper.c)
    slots = max(graph.num_directed, 1)
    history = []
    reference = None
    status, reason = Status.MAX_ITERS, ''
    iteration = 0
    for iteration in range(1, hyper.T + 1):
        new_a, new_b, change, singular = kernel.update(store.a, store.b, hyper.eta)
        delta = change / (2 * slots)
        history.append(delta)
        candidate = MessageStore(new_a, new_b)
        marginals = compute_marginals(graph, candidate, hyper.c)
        reason = divergence_reason(new_a, new_b, singular, marginals)
        if reason:
            status = Status.DIVERGED
            break
        store = candidate
        if iteration % hyper.log_every == 0:
            logger.debug("sweep %d: mean absolute change %.3e", iteration, delta)
        if iteration == 2:
            reference = delta
        if is_growing(reference, delta):
            status, reason = Status.DIVERGED, 'messages growing'
            break
        if reference is not None and early_stop(reference, delta, hyper.tau):
            status = Status.CONVERGED
            break
    marginals = compute_marginals(graph, store, hyper.c)
    if status is not Status.DIVERGED and not marginals.is_valid():
        status, reason = Status.DIVERGED, 'non-positive marginal precision'
    if status is Status.DIVERGED:
        logger.warning("message passing diverged after %d sweeps: %s", iteration, reason)
    else:
        logger.info("message passing %s after %d sweeps", status.value, iteration)
    return MPResult(marginals, iteration, status, store, history, reason)
