"""Factor graph of a Gaussian model in information form.

A Gaussian density ``exp(-1/2 f^T P f + h^T f)`` factorizes into node
potentials ``exp(-1/2 P_ii f_i^2 + h_i f_i)`` and edge potentials
``exp(-P_ij f_i f_j)``; two nodes share an edge exactly when ``P_ij != 0``.
Point observations with Gaussian noise only touch the node potentials.
"""

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp

from .grid import GridSpec
from .operator import SparseOperator
from .utils import MPDAError


class InvalidPrecisionError(MPDAError, ValueError):
    """Raised when a matrix cannot serve as a Gaussian precision."""
    pass


class DimensionError(MPDAError, ValueError):
    """Raised when vector and operator dimensions disagree."""
    pass


class ObservationError(MPDAError, ValueError):
    """Raised for observation entries outside the grid or with bad noise."""
    pass


@dataclass(frozen=True)
class ObservationSet:
    """Point observations ``y_i = f_i + noise`` with per-entry noise variances.

    Attributes:
        index: Linear node index of every observation.
        value: Observed values.
        variance: Noise variances, all strictly positive.
    """

    index: np.ndarray
    value: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        index = np.asarray(self.index, dtype=np.int64).reshape(-1)
        value = np.asarray(self.value, dtype=float).reshape(-1)
        variance = np.broadcast_to(np.asarray(self.variance, dtype=float), value.shape).copy()
        if not len(index) == len(value):
            raise ObservationError("observation index and value lengths differ")
        if np.any(index < 0):
            raise ObservationError("negative observation index")
        if not np.all(np.isfinite(value)):
            raise ObservationError("observation values must be finite")
        if not np.all((variance > 0) & np.isfinite(variance)):
            raise ObservationError("observation noise variances must be positive and finite")
        object.__setattr__(self, 'index', index)
        object.__setattr__(self, 'value', value)
        object.__setattr__(self, 'variance', variance)

    @classmethod
    def empty(cls) -> "ObservationSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))

    @classmethod
    def from_coordinates(cls, g: GridSpec, x, y, value, variance) -> "ObservationSet":
        """Observations at possibly fractional grid coordinates.

        Coordinates snap to the nearest node, ties going to the lower index.

        Raises:
            ObservationError: If a snapped coordinate falls outside the grid.
        """
        i = np.ceil(np.asarray(x, dtype=float) - 0.5).astype(np.int64)
        j = np.ceil(np.asarray(y, dtype=float) - 0.5).astype(np.int64)
        outside = (i < 0) | (i >= g.nx) | (j < 0) | (j >= g.ny)
        if np.any(outside):
            k = int(np.flatnonzero(outside)[0])
            raise ObservationError(f"observation at ({x[k]}, {y[k]}) outside grid {g.nx}x{g.ny}")
        return cls(j * g.nx + i, value, variance)

    def __len__(self):
        return len(self.index)

    def check_within(self, n: int):
        if len(self) and int(self.index.max()) >= n:
            raise ObservationError(f"observation index {int(self.index.max())} outside a graph of {n} nodes")


@dataclass(frozen=True)
class FactorGraph:
    """Node potentials plus symmetric edge weights of a Gaussian model.

    The edge weights are kept as the off-diagonal part of the precision in
    CSR form, both directions present: slot ``e`` of row ``i`` is the
    directed edge ``i -> indices[e]``. ``reverse[e]`` is the slot of the
    opposite direction.

    Attributes:
        node_precision: ``P_ii`` per node (strictly positive).
        node_shift: ``h_i`` per node.
        indptr, indices, weights: Off-diagonal CSR structure, ``weights[e] = P_ij``.
        reverse: Slot of the reversed edge of every slot.
    """

    node_precision: np.ndarray
    node_shift: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    reverse: np.ndarray
    source: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.source is None:
            object.__setattr__(self, 'source', np.repeat(np.arange(self.n), np.diff(self.indptr)))

    @property
    def n(self) -> int:
        return len(self.node_precision)

    @property
    def num_directed(self) -> int:
        return len(self.indices)

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor indices and edge weights of node `i`."""
        start, stop = self.indptr[i], self.indptr[i + 1]
        return self.indices[start:stop], self.weights[start:stop]

    def edges(self) -> Iterator[tuple[int, int, float]]:
        """Yield every undirected edge once as ``(i, j, P_ij)`` with ``i < j``."""
        for e in np.flatnonzero(self.source < self.indices):
            yield int(self.source[e]), int(self.indices[e]), float(self.weights[e])

    def with_nodes(self, node_precision: np.ndarray, node_shift: np.ndarray) -> "FactorGraph":
        """Copy sharing the edge arrays, with new node potentials."""
        return FactorGraph(node_precision, node_shift, self.indptr, self.indices, self.weights,
                           self.reverse, self.source)

    def precision_matrix(self) -> sp.csr_matrix:
        off = sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))
        return (off + sp.diags(self.node_precision)).tocsr()

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(P, h)`` of the graph."""
        return self.precision_matrix().toarray(), self.node_shift.copy()


def _reverse_slots(indptr: np.ndarray, indices: np.ndarray, n: int) -> np.ndarray:
    # slot numbers are shifted by one so that slot 0 is never an explicit zero
    slots = sp.csr_matrix((np.arange(1, len(indices) + 1, dtype=float), indices, indptr), shape=(n, n))
    transposed = slots.T.tocsr()
    transposed.sort_indices()
    return transposed.data.astype(np.int64) - 1


def from_precision(P: SparseOperator, shift: Optional[np.ndarray] = None) -> FactorGraph:
    """Factor graph of the density ``exp(-1/2 f^T P f + shift^T f)``.

    Raises:
        InvalidPrecisionError: If `P` is not exactly symmetric or has a
            non-positive diagonal entry.
        DimensionError: If `shift` does not match the size of `P`.
    """
    if not P.is_symmetric():
        raise InvalidPrecisionError("precision matrix is not symmetric")
    diagonal = P.diagonal()
    if np.any(diagonal <= 0):
        raise InvalidPrecisionError(f"non-positive precision diagonal at node {int(np.argmax(diagonal <= 0))}")
    if shift is None:
        shift = np.zeros(P.n)
    shift = np.asarray(shift, dtype=float)
    if shift.shape != (P.n,):
        raise DimensionError(f"shift of shape {shift.shape} for a precision of size {P.n}")
    off = P.matrix.copy()
    off.setdiag(0)
    off.eliminate_zeros()
    off.sort_indices()
    indptr = off.indptr.astype(np.int64)
    indices = off.indices.astype(np.int64)
    return FactorGraph(diagonal.astype(float), shift.copy(), indptr, indices, off.data.copy(),
                       _reverse_slots(indptr, indices, P.n))


def prior_shift_from_mean(P: SparseOperator, mean) -> np.ndarray:
    """Shift ``h = P mean`` centring the prior ``exp(-1/2 f^T P f + h^T f)`` at `mean`."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (P.n,):
        raise DimensionError(f"mean of shape {mean.shape} for a precision of size {P.n}")
    return P @ mean


def apply_observations(g: FactorGraph, obs: ObservationSet) -> FactorGraph:
    """Multiply the node potentials by the observation likelihoods.

    Each entry ``(i, y, v)`` adds ``1/v`` to ``P_ii`` and ``y/v`` to ``h_i``;
    repeated observations of a node accumulate.
    """
    obs.check_within(g.n)
    precision = g.node_precision.copy()
    shift = g.node_shift.copy()
    np.add.at(precision, obs.index, 1.0 / obs.variance)
    np.add.at(shift, obs.index, obs.value / obs.variance)
    return g.with_nodes(precision, shift)
