"""Finite-difference discretization of ``(kappa^2 - Laplacian)^(alpha/2)`` and GMRF precision assembly.

The shift operator ``L`` is the 5-point stencil of ``kappa^2 - Laplacian``. The
prior precision is ``P = gamma * (L^(alpha/2))^T L^(alpha/2)`` with
``gamma = dx * dy / (sigma^2 * q)``; it is sparse because ``alpha/2`` is an
integer.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as gamma_function, kv

from .grid import GridSpec, Boundary
from .utils import MPDAError

PRUNE_TOLERANCE = 1e-14
DIMENSION = 2


class ParameterError(MPDAError, ValueError):
    """Raised for hyperparameters outside their valid range."""
    pass


def compute_q(nu: float, kappa: float, d: int = DIMENSION) -> float:
    """White-noise constant giving the field marginal variance ``sigma^2``.

    ``q = (4 pi)^(d/2) kappa^(2 nu) Gamma(nu + d/2) / Gamma(nu)``.
    """
    if nu <= 0 or kappa <= 0:
        raise ParameterError(f"nu and kappa must be positive, got nu={nu}, kappa={kappa}")
    return (4 * math.pi) ** (d / 2) * kappa ** (2 * nu) * gamma_function(nu + d / 2) / gamma_function(nu)


@dataclass(frozen=True)
class Hyperparams:
    """Prior, observation and solver parameters.

    The prior parameters are physical (domain units); grid dependent
    quantities such as ``gamma`` are derived per grid, so the same instance
    serves every multigrid level.

    Attributes:
        alpha: Even positive SPDE exponent.
        lengthscale: Matern lengthscale ``l``; ``kappa = sqrt(2 nu) / l``.
        sigma2: Marginal variance of the prior field.
        sigma_y2: Observation noise variance, ``0.01 * sigma2`` when omitted.
        c: Message re-weighting constant (any non-zero real).
        eta: Damping rate in ``(0, 1]``.
        tau: Relative early-stop threshold.
        T: Maximum number of sweeps.
        log_every: Sweeps between two progress log records.
    """

    alpha: int = 2
    lengthscale: float = 0.15
    sigma2: float = 1.21
    sigma_y2: Optional[float] = None
    c: float = 10.0
    eta: float = 0.6
    tau: float = 1e-3
    T: int = 10000
    log_every: int = 100

    def __post_init__(self):
        if self.sigma_y2 is None:
            object.__setattr__(self, 'sigma_y2', 0.01 * self.sigma2)
        if int(self.alpha) != self.alpha or self.alpha <= 0 or self.alpha % 2:
            raise ParameterError(f"alpha must be an even positive integer, got {self.alpha}")
        for name in ('lengthscale', 'sigma2', 'sigma_y2', 'tau'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be positive and finite, got {value}")
        if not 0 < self.eta <= 1:
            raise ParameterError(f"eta must lie in (0, 1], got {self.eta}")
        if self.c == 0 or not math.isfinite(self.c):
            raise ParameterError("c must be a finite non-zero real")
        if int(self.T) != self.T or self.T < 1:
            raise ParameterError(f"T must be a positive integer, got {self.T}")
        object.__setattr__(self, 'alpha', int(self.alpha))
        object.__setattr__(self, 'T', int(self.T))

    @classmethod
    def synthetic_defaults(cls, **changes) -> "Hyperparams":
        """Defaults of the synthetic experiments: nu=1, l=0.15, sigma=1.1, c=10, eta=0.6."""
        return cls(**changes)

    def with_(self, **changes) -> "Hyperparams":
        """Copy with some fields changed; a changed ``sigma2`` re-derives a defaulted ``sigma_y2``."""
        if 'sigma2' in changes and 'sigma_y2' not in changes and self.sigma_y2 == 0.01 * self.sigma2:
            changes['sigma_y2'] = None
        return replace(self, **changes)

    @property
    def nu(self) -> float:
        """Smoothness ``alpha - d/2``."""
        return self.alpha - DIMENSION / 2

    @property
    def kappa(self) -> float:
        return math.sqrt(2 * self.nu) / self.lengthscale

    @property
    def q(self) -> float:
        return compute_q(self.nu, self.kappa, DIMENSION)

    def gamma(self, grid: GridSpec) -> float:
        """Precision scale ``dx * dy / (sigma^2 q)`` on `grid`."""
        return grid.cell_area / (self.sigma2 * self.q)

    def as_dict(self) -> dict:
        return {'alpha': self.alpha, 'lengthscale': self.lengthscale, 'sigma2': self.sigma2,
                'sigma_y2': self.sigma_y2, 'c': self.c, 'eta': self.eta, 'tau': self.tau, 'T': self.T}


class SparseOperator:
    """Sparse square matrix over grid nodes, stored in canonical CSR form.

    Rows keep their column indices sorted, duplicates are summed and explicit
    zeros are dropped. Products are pruned below ``PRUNE_TOLERANCE``.
    """

    def __init__(self, matrix):
        matrix = sp.csr_matrix(matrix, dtype=float)
        if matrix.shape[0] != matrix.shape[1]:
            raise ParameterError(f"operator must be square, got shape {matrix.shape}")
        matrix.sum_duplicates()
        matrix.sort_indices()
        matrix.eliminate_zeros()
        if not np.all(np.isfinite(matrix.data)):
            raise ParameterError("operator has non-finite entries")
        self._matrix = matrix

    @classmethod
    def from_dense(cls, array) -> "SparseOperator":
        return cls(sp.csr_matrix(np.asarray(array, dtype=float)))

    @property
    def matrix(self) -> sp.csr_matrix:
        return self._matrix

    @property
    def n(self) -> int:
        return self._matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self._matrix.nnz

    def diagonal(self) -> np.ndarray:
        return self._matrix.diagonal()

    def to_dense(self) -> np.ndarray:
        return self._matrix.toarray()

    def transpose(self) -> "SparseOperator":
        return SparseOperator(self._matrix.T)

    def scaled(self, factor: float) -> "SparseOperator":
        return SparseOperator(self._matrix * factor)

    def is_symmetric(self) -> bool:
        """Exact, entry-by-entry symmetry."""
        difference = self._matrix - self._matrix.T
        return difference.count_nonzero() == 0

    def symmetrized(self) -> "SparseOperator":
        """``(A + A^T) / 2``, which is exactly symmetric in floating point."""
        return SparseOperator((self._matrix + self._matrix.T) * 0.5)

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            return SparseOperator(_pruned(self._matrix @ other._matrix))
        return self._matrix @ np.asarray(other, dtype=float)

    def __repr__(self):
        return f'SparseOperator(n={self.n}, nnz={self.nnz})'


def _pruned(matrix: sp.csr_matrix) -> sp.csr_matrix:
    matrix = sp.csr_matrix(matrix)
    matrix.sum_duplicates()
    matrix.data[np.abs(matrix.data) < PRUNE_TOLERANCE] = 0.0
    matrix.eliminate_zeros()
    return matrix


def _second_difference(m: int, h: float, periodic: bool) -> sp.csr_matrix:
    """1D stencil of ``-d^2/dx^2``: ``2/h^2`` on the diagonal, ``-1/h^2`` on the legs."""
    if m == 1:
        return sp.csr_matrix((1, 1))
    off = np.full(m - 1, -1.0 / h ** 2)
    stencil = sp.diags([off, np.full(m, 2.0 / h ** 2), off], [-1, 0, 1], format='lil')
    if periodic:
        stencil[0, m - 1] += -1.0 / h ** 2
        stencil[m - 1, 0] += -1.0 / h ** 2
    return stencil.tocsr()


def build_shift_operator(g: GridSpec, kappa: float) -> SparseOperator:
    """5-point discretization of ``kappa^2 - Laplacian`` on `g`.

    Dirichlet grids drop the stencil legs that leave the grid (zero exterior
    values), periodic grids wrap them around.
    """
    if not (math.isfinite(kappa) and kappa > 0):
        raise ParameterError(f"kappa must be positive and finite, got {kappa}")
    periodic = g.boundary is Boundary.PERIODIC
    dxx = _second_difference(g.nx, g.dx, periodic)
    dyy = _second_difference(g.ny, g.dy, periodic)
    laplacian = sp.kron(sp.identity(g.ny), dxx) + sp.kron(dyy, sp.identity(g.nx))
    return SparseOperator(kappa ** 2 * sp.identity(g.n) + laplacian).symmetrized()


def operator_power(L: SparseOperator, p: int) -> SparseOperator:
    """``L^p`` by repeated sparse products; symmetric for symmetric `L`."""
    if int(p) != p or p < 1:
        raise ParameterError(f"power must be a positive integer, got {p}")
    result = L
    for _ in range(int(p) - 1):
        result = result @ L
    return result.symmetrized()


def build_precision(g: GridSpec, h: Hyperparams) -> SparseOperator:
    """Prior precision ``P = gamma * (L^(alpha/2))^T L^(alpha/2)`` on grid `g`."""
    if h.alpha % 2:
        raise ParameterError(f"alpha must be even, got {h.alpha}")
    root = operator_power(build_shift_operator(g, h.kappa), h.alpha // 2)
    return (root.transpose() @ root).scaled(h.gamma(g)).symmetrized()


def matern_covariance(distance, h: Hyperparams) -> np.ndarray:
    """Continuous Matern covariance of the prior at the given distances."""
    r = np.sqrt(2 * h.nu) * np.abs(np.asarray(distance, dtype=float)) / h.lengthscale
    with np.errstate(invalid='ignore'):
        value = h.sigma2 * 2 ** (1 - h.nu) / gamma_function(h.nu) * r ** h.nu * kv(h.nu, r)
    return np.where(r == 0, h.sigma2, value)
