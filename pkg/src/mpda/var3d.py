"""3D-Var baseline.

The analysis minimizes the precision-form cost

    J(f) = 1/2 sum_obs (y_i - f_i)^2 / v_i + 1/2 (f - f_b)^T P (f - f_b)

with a limited-memory BFGS driven by a strong-Wolfe line search. For a linear
observation operator the minimizer is the posterior mean.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional

import numpy as np

from .graph import DimensionError, ObservationSet
from .grid import GridSpec
from .operator import Hyperparams, SparseOperator, build_precision
from .utils import MPDAError

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
CURVATURE = 0.9
MAX_BRACKET_STEPS = 40
MAX_ZOOM_STEPS = 40


class LBFGSStatus(str, Enum):
    CONVERGED = 'converged'
    MAX_ITERS = 'max_iters'
    LINE_SEARCH_FAILED = 'line_search_failed'


@dataclass(frozen=True)
class VarProblem:
    """Prior precision, background state and observations of a 3D-Var analysis."""

    precision: SparseOperator
    prior_mean: np.ndarray
    obs: ObservationSet

    def __post_init__(self):
        prior_mean = np.asarray(self.prior_mean, dtype=float)
        if prior_mean.shape != (self.precision.n,):
            raise DimensionError(f"background of shape {prior_mean.shape} for a precision of size {self.precision.n}")
        self.obs.check_within(self.precision.n)
        object.__setattr__(self, 'prior_mean', prior_mean)

    @classmethod
    def from_prior(cls, grid: GridSpec, hyper: Hyperparams, obs: ObservationSet,
                   prior_mean: Optional[np.ndarray] = None) -> "VarProblem":
        """Problem with the GMRF prior of `hyper` on `grid` (zero background when omitted)."""
        background = np.zeros(grid.n) if prior_mean is None else prior_mean
        return cls(build_precision(grid, hyper), background, obs)

    @property
    def n(self) -> int:
        return self.precision.n

    def _check(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n,):
            raise DimensionError(f"state of shape {f.shape} for a problem of size {self.n}")
        return f


class VarResult(NamedTuple):
    f_map: np.ndarray
    status: LBFGSStatus
    iterations: int
    cost_history: list
    gradient_norm: float


def cost(p: VarProblem, f) -> float:
    """Observation misfit plus prior penalty at `f`."""
    f = p._check(f)
    residual = p.obs.value - f[p.obs.index]
    departure = f - p.prior_mean
    return 0.5 * float(np.sum(residual ** 2 / p.obs.variance)) + 0.5 * float(departure @ (p.precision @ departure))


def gradient(p: VarProblem, f) -> np.ndarray:
    """``P (f - f_b)`` plus ``(f_i - y_i) / v_i`` accumulated on every observed node."""
    f = p._check(f)
    g = p.precision @ (f - p.prior_mean)
    np.add.at(g, p.obs.index, (f[p.obs.index] - p.obs.value) / p.obs.variance)
    return g


def _value_and_gradient(p: VarProblem, f: np.ndarray) -> tuple[float, np.ndarray]:
    departure = f - p.prior_mean
    prior_term = p.precision @ departure
    residual = f[p.obs.index] - p.obs.value
    g = prior_term.copy()
    np.add.at(g, p.obs.index, residual / p.obs.variance)
    value = 0.5 * float(np.sum(residual ** 2 / p.obs.variance)) + 0.5 * float(departure @ prior_term)
    return value, g


def _two_loop(g: np.ndarray, s_list: list, y_list: list) -> np.ndarray:
    """Product of the L-BFGS inverse Hessian approximation with `g`."""
    q = g.copy()
    rhos = [1.0 / float(y @ s) for s, y in zip(s_list, y_list)]
    alphas = []
    for s, y, rho in reversed(list(zip(s_list, y_list, rhos))):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_list, y_list, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _cubic_minimizer(lo, f_lo, g_lo, hi, f_hi, g_hi) -> Optional[float]:
    d1 = g_lo + g_hi - 3 * (f_lo - f_hi) / (lo - hi)
    radicand = d1 * d1 - g_lo * g_hi
    if radicand < 0:
        return None
    d2 = math.copysign(math.sqrt(radicand), hi - lo)
    denominator = g_hi - g_lo + 2 * d2
    if denominator == 0:
        return None
    return hi - (hi - lo) * (g_hi + d2 - d1) / denominator


LinePoint = tuple[float, float, float]


def strong_wolfe(phi: Callable[[float], tuple[float, float]], phi0: float, dphi0: float,
                 step: float = 1.0, c1: float = ARMIJO, c2: float = CURVATURE) -> Optional[float]:
    """Step length satisfying the strong Wolfe conditions, or ``None``.

    Args:
        phi: Returns the value and the directional derivative at a step length.
        phi0: Value at step 0.
        dphi0: Directional derivative at step 0, must be negative.
        step: First trial step.
        c1: Sufficient decrease constant.
        c2: Curvature constant.
    """
    previous: LinePoint = (0.0, phi0, dphi0)
    for k in range(MAX_BRACKET_STEPS):
        value, slope = phi(step)
        current: LinePoint = (step, value, slope)
        if not math.isfinite(value) or value > phi0 + c1 * step * dphi0 or (k > 0 and value >= previous[1]):
            return _zoom(phi, previous, current, phi0, dphi0, c1, c2)
        if abs(slope) <= -c2 * dphi0:
            return step
        if slope >= 0:
            return _zoom(phi, current, previous, phi0, dphi0, c1, c2)
        previous = current
        step *= 2
    return None


def _zoom(phi, lo: LinePoint, hi: LinePoint, phi0: float, dphi0: float, c1: float, c2: float) -> Optional[float]:
    for _ in range(MAX_ZOOM_STEPS):
        width = hi[0] - lo[0]
        if abs(width) <= 1e-16 * max(1.0, abs(lo[0])):
            return None
        trial = None
        if math.isfinite(hi[1]):
            trial = _cubic_minimizer(*lo, *hi)
        low_end, high_end = sorted((lo[0], hi[0]))
        margin = 0.1 * abs(width)
        if trial is None or not (low_end + margin <= trial <= high_end - margin):
            trial = lo[0] + 0.5 * width
        value, slope = phi(trial)
        if not math.isfinite(value) or value > phi0 + c1 * trial * dphi0 or value >= lo[1]:
            hi = (trial, value, slope)
            continue
        if abs(slope) <= -c2 * dphi0:
            return trial
        if slope * width >= 0:
            hi = lo
        lo = (trial, value, slope)
    return None


def _hessian_product(p: VarProblem, d: np.ndarray) -> np.ndarray:
    """``H d`` for the constant Hessian ``H = P + sum_obs e_i e_i^T / v_i``."""
    hd = p.precision @ d
    np.add.at(hd, p.obs.index, d[p.obs.index] / p.obs.variance)
    return hd


def minimize(p: VarProblem, init=None, memory: int = 10, tol: float = 1e-3, max_iters: int = 500) -> VarResult:
    """L-BFGS minimization of :func:`cost`.

    Stops when the Euclidean norm of the gradient is at most `tol` or after
    `max_iters` iterations. Along a search direction ``d`` the line search
    sees the cost change ``t g.d + t^2 d.Hd / 2`` and starts from its exact
    minimizer.

    Args:
        p: The analysis problem.
        init: Starting state, the background when omitted.
        memory: Number of correction pairs kept.
        tol: Absolute gradient tolerance.
        max_iters: Iteration cap.
    """
    if memory < 1:
        raise MPDAError(f"L-BFGS memory must be at least 1, got {memory}")
    x = p._check(p.prior_mean if init is None else init).copy()
    value, g = _value_and_gradient(p, x)
    history = [value]
    s_list, y_list = [], []
    status = LBFGSStatus.MAX_ITERS
    iteration = 0
    while True:
        gradient_norm = float(np.linalg.norm(g))
        if gradient_norm <= tol:
            status = LBFGSStatus.CONVERGED
            break
        if iteration >= max_iters:
            break
        direction = -_two_loop(g, s_list, y_list)
        slope0 = float(g @ direction)
        if not slope0 < 0:
            s_list, y_list = [], []
            direction = -g
            slope0 = float(g @ direction)
        curvature = float(direction @ _hessian_product(p, direction))
        t = None
        if math.isfinite(curvature) and curvature > 0:
            def phi(step, slope0=slope0, curvature=curvature):
                return step * slope0 + 0.5 * step * step * curvature, slope0 + step * curvature

            t = strong_wolfe(phi, 0.0, slope0, -slope0 / curvature)
        if t is None:
            status = LBFGSStatus.LINE_SEARCH_FAILED
            logger.warning("3D-Var line search failed at iteration %d (J=%.6e)", iteration, value)
            break
        new_x = x + t * direction
        new_value, new_g = _value_and_gradient(p, new_x)
        s, y = new_x - x, new_g - g
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        x, value, g = new_x, new_value, new_g
        history.append(value)
        iteration += 1
        logger.debug("3D-Var iteration %d: J=%.10e, |grad J|=%.3e", iteration, value, float(np.linalg.norm(g)))
    logger.info("3D-Var %s after %d iterations (J=%.6e)", status.value, iteration, value)
    return VarResult(x, status, iteration, history, gradient_norm)
