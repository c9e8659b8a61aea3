"""
1-Wasserstein distances between empirical score distributions.

exact_w1_1d is the closed form for equal-size uniform atom sets (sorted
matching). sinkhorn_w1 solves the entropic problem in the log domain with
epsilon scaling: the regularisation starts at the cost diameter and is
annealed geometrically down to the target epsilon, warm-starting the dual
potentials at every level. Intermediate levels only need a rough solve, so
they stop at `level_tol` or after `level_max_iters`; the full tolerance and
iteration budget apply at the target epsilon. The debiased form subtracts
the two self-transport terms so that the loss vanishes when both
distributions agree.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from numerics_core import (EmpiricalDistribution, GridMismatchError,
                           InvalidArgumentError, TransportNotConverged)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1e-4
    max_iters: int = 10000
    tol: float = 1e-9
    eps_scaling_steps: int = 24
    debiased: bool = True
    check_every: int = 10
    level_tol: float = 1e-3
    level_max_iters: int = 100

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"Sinkhorn epsilon must be positive, got {self.epsilon}")
        if not self.tol > 0 or not self.level_tol > 0:
            raise InvalidArgumentError(f"Sinkhorn tolerances must be positive, got {self.tol} and {self.level_tol}")
        if self.max_iters < 1 or self.level_max_iters < 1:
            raise InvalidArgumentError(
                f"Sinkhorn needs at least one iteration, got {self.max_iters} and {self.level_max_iters}")
        if self.check_every < 1:
            raise InvalidArgumentError(f"check_every must be at least 1, got {self.check_every}")

    def schedule(self, diameter: float) -> np.ndarray:
        """Decreasing regularisation levels ending exactly at `epsilon`"""
        start = max(float(diameter), self.epsilon)
        if self.eps_scaling_steps <= 1 or start <= self.epsilon:
            return np.array([self.epsilon])
        return np.geomspace(start, self.epsilon, self.eps_scaling_steps)

    def level_budget(self, final: bool) -> Tuple[float, int]:
        """(marginal tolerance, iteration cap) for one epsilon level"""
        if final:
            return self.tol, self.max_iters
        return max(self.tol, self.level_tol), min(self.max_iters, self.level_max_iters)


@dataclass
class TransportResult:
    cost: float
    potential_f: np.ndarray
    potential_g: np.ndarray
    iterations_used: int
    converged: bool


@dataclass
class _EntropicSolution:
    cost: float
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    iterations: int
    converged: bool


class _AbsKernel:
    """
    Gibbs kernel of the cost |x_i - y_j|, applied in the log domain.

    With y sorted, the terms with y_j <= x_i factor as exp(-x_i / eps) times a
    prefix sum over exp(y_j / eps), and the rest as exp(x_i / eps) times a
    suffix sum over exp(-y_j / eps). One application is two cumulative
    log-sum-exps over m values instead of an n-by-m reduction.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = x
        self.order = np.argsort(y, kind='stable')
        self.y_sorted = y[self.order]
        self.at_or_below = np.searchsorted(self.y_sorted, x, side='right')
        self.below = np.searchsorted(self.y_sorted, x, side='left')

    def _partial_sums(self, h: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
        hs = h[self.order]
        scaled = self.y_sorted / eps
        prefix = np.concatenate(([-np.inf], np.logaddexp.accumulate(hs + scaled)))
        suffix = np.concatenate((np.logaddexp.accumulate((hs - scaled)[::-1])[::-1], [-np.inf]))
        return prefix, suffix

    def logsumexp(self, h: np.ndarray, eps: float) -> np.ndarray:
        """log sum_j exp(h_j - |x_i - y_j| / eps) for every i"""
        prefix, suffix = self._partial_sums(h, eps)
        scaled = self.x / eps
        return np.logaddexp(prefix[self.at_or_below] - scaled, suffix[self.at_or_below] + scaled)

    def split_logsumexp(self, h: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
        """Same sum restricted to y_j < x_i and to y_j > x_i; ties are in neither"""
        prefix, suffix = self._partial_sums(h, eps)
        scaled = self.x / eps
        return prefix[self.below] - scaled, suffix[self.at_or_below] + scaled


def exact_w1_1d(a: EmpiricalDistribution, b: EmpiricalDistribution) -> float:
    if a.n != b.n:
        raise GridMismatchError(f"Exact 1D W1 needs equal atom counts, got {a.n} and {b.n}")
    return float(np.mean(np.abs(a.sorted_atoms() - b.sorted_atoms())))


def exact_w1_grad_1d(a: EmpiricalDistribution, b: EmpiricalDistribution) -> np.ndarray:
    """Subgradient of exact_w1_1d with respect to the atoms of `a`; zero at ties"""
    if a.n != b.n:
        raise GridMismatchError(f"Exact 1D W1 needs equal atom counts, got {a.n} and {b.n}")
    order = np.argsort(a.atoms, kind='stable')
    grad = np.empty(a.n)
    grad[order] = np.sign(a.atoms[order] - b.sorted_atoms()) / a.n
    return grad


def _diameter(x: np.ndarray, y: np.ndarray) -> float:
    return float(max(x.max() - y.min(), y.max() - x.min()))


def _solve_entropic(x: np.ndarray, y: np.ndarray, cfg: SinkhornConfig) -> _EntropicSolution:
    n, m = x.size, y.size
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    rows, cols = _AbsKernel(x, y), _AbsKernel(y, x)
    f, g = np.zeros(n), np.zeros(m)
    levels = cfg.schedule(_diameter(x, y))
    total_iters = 0
    converged = False
    eps = float(levels[-1])
    for level, eps in enumerate(levels):
        tol, cap = cfg.level_budget(final=level == levels.size - 1)
        converged = False
        for it in range(cap):
            f = -eps * rows.logsumexp(log_b + g / eps, eps)
            g_next = -eps * cols.logsumexp(log_a + f / eps, eps)
            total_iters += 1
            if it % cfg.check_every and it < cap - 1:
                g = g_next
                continue
            # rows are exact for (f, g); column j holds b_j * exp((g_j - g_next_j) / eps)
            drift = np.minimum((g - g_next) / eps, 700.0)
            violation = float(np.exp(log_b) @ np.abs(np.expm1(drift)))
            g = g_next
            if violation <= tol:
                converged = True
                break
        logger.debug(f"Sinkhorn level eps={eps:.3g}: {it + 1} iterations, converged={converged}")
    value = float(np.exp(log_a) @ f + np.exp(log_b) @ g)
    return _EntropicSolution(value, f, g, float(eps), total_iters, converged)


def _signed_plan_rows(x: np.ndarray, y: np.ndarray, f: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    """sum_j P_ij * sign(x_i - y_j) for the plan with log-potentials (f, g) and uniform weights"""
    lower, upper = _AbsKernel(x, y).split_logsumexp(g / eps - np.log(y.size), eps)
    scaled_f = f / eps
    return (np.exp(scaled_f + lower) - np.exp(scaled_f + upper)) / x.size


def _atoms(dist) -> np.ndarray:
    atoms = dist.atoms if isinstance(dist, EmpiricalDistribution) else np.asarray(dist, dtype=np.float64)
    if atoms.size == 0:
        raise InvalidArgumentError("Sinkhorn needs non-empty distributions")
    if not np.all(np.isfinite(atoms)):
        raise InvalidArgumentError("Sinkhorn needs finite atoms")
    return atoms


def sinkhorn_w1_with_grad(a, b, cfg: SinkhornConfig = SinkhornConfig(),
                          b_self: Optional[_EntropicSolution] = None) -> Tuple[TransportResult, np.ndarray]:
    """
    Entropic W1 cost together with its gradient with respect to the atoms of `a`.

    The gradient follows from the envelope theorem on the dual problem: the
    derivative of the cost with respect to C_ij is the optimal plan entry
    P_ij, and dC_ij/dx_i = sign(x_i - y_j). `b_self` lets callers reuse the
    target self-transport solve, which does not depend on `a`.
    """
    x, y = _atoms(a), _atoms(b)
    cross = _solve_entropic(x, y, cfg)
    grad = _signed_plan_rows(x, y, cross.f, cross.g, cross.epsilon)
    cost = cross.cost
    potential_f, potential_g = cross.f, cross.g
    iterations, converged = cross.iterations, cross.converged
    if cfg.debiased:
        self_x = _solve_entropic(x, x, cfg)
        self_y = b_self if b_self is not None else solve_self_transport(y, cfg)
        # x enters both marginals of the self term; the 1/2 weight cancels the doubling
        grad -= 0.5 * (_signed_plan_rows(x, x, self_x.f, self_x.g, self_x.epsilon)
                       + _signed_plan_rows(x, x, self_x.g, self_x.f, self_x.epsilon))
        cost -= 0.5 * (self_x.cost + self_y.cost)
        potential_f = cross.f - 0.5 * (self_x.f + self_x.g)
        potential_g = cross.g - 0.5 * (self_y.f + self_y.g)
        iterations += self_x.iterations
        converged = converged and self_x.converged and self_y.converged
    if not converged:
        logger.debug(f"Sinkhorn did not reach tol={cfg.tol:g} within {cfg.max_iters} iterations at the target epsilon")
    result = TransportResult(cost=float(cost), potential_f=potential_f, potential_g=potential_g,
                             iterations_used=iterations, converged=converged)
    return result, grad


def solve_self_transport(atoms, cfg: SinkhornConfig) -> _EntropicSolution:
    atoms = _atoms(atoms)
    return _solve_entropic(atoms, atoms, cfg)


def sinkhorn_w1(a, b, cfg: SinkhornConfig = SinkhornConfig()) -> TransportResult:
    result, _ = sinkhorn_w1_with_grad(a, b, cfg)
    return result


def w1_grad_atoms(a, b, cfg: SinkhornConfig = SinkhornConfig()) -> np.ndarray:
    result, grad = sinkhorn_w1_with_grad(a, b, cfg)
    if not result.converged:
        raise TransportNotConverged(
            f"Sinkhorn did not converge after {result.iterations_used} iterations; "
            f"increase max_iters or epsilon")
    return grad
