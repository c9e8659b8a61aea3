"""
Instrumental-variable baseline.

The conditional-expectation operators T = E[. | W] and T* = E[. | X] are
estimated with Gaussian-kernel local linear regression. Each fitted
regressor is a linear smoother, so it is stored as the matrix mapping
targets to fitted values at the sample points; T(phi) and T*(psi) are then
matrix-vector products. The inverse problem T(phi) = r is solved with the
Landweber-Fridman iteration, the iteration count being the regularisation
parameter chosen by leave-one-out cross validation.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from numerics_core import InvalidArgumentError, NumericalFailure

logger = logging.getLogger(__name__)

# reciprocal condition number below which the local system counts as singular
SINGULAR_RCOND = 1e-12


class LocalPrediction(NamedTuple):
    value: float
    fallback: bool  # True when the locally-constant estimate was used


@dataclass
class LocalLinearRegressor:
    predictors: np.ndarray
    targets: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.predictors = np.asarray(self.predictors, dtype=np.float64)
        if self.predictors.ndim == 1:
            self.predictors = self.predictors[:, None]
        self.targets = np.asarray(self.targets, dtype=np.float64).ravel()
        n, d = self.predictors.shape
        if self.targets.size != n:
            raise InvalidArgumentError(f"Got {n} predictor rows but {self.targets.size} targets")
        if n <= d + 1:
            raise InvalidArgumentError(f"Local linear regression in {d} dimensions needs more than {d + 1} samples")
        if not self.bandwidth > 0:
            raise InvalidArgumentError(f"Bandwidth must be positive, got {self.bandwidth}")

    def weights_row(self, query: np.ndarray) -> Tuple[np.ndarray, bool]:
        """Smoother weights l(query) such that the fitted value is l(query) @ targets"""
        offsets = self.predictors - query[None, :]
        sq_dist = np.einsum('ij,ij->i', offsets, offsets)
        # shifting by the nearest distance rescales all weights by one constant
        kernel = np.exp(-(sq_dist - sq_dist.min()) / (2.0 * self.bandwidth ** 2))
        design = np.column_stack([np.ones(len(offsets)), offsets])
        weighted = design * kernel[:, None]
        gram = design.T @ weighted
        if np.linalg.cond(gram) * SINGULAR_RCOND < 1.0:
            row = np.linalg.solve(gram, weighted.T)[0]
            return row, False
        return kernel / kernel.sum(), True

    def smoother_matrix(self, queries: Optional[np.ndarray] = None) -> np.ndarray:
        queries = self.predictors if queries is None else np.atleast_2d(queries)
        rows = []
        fallbacks = 0
        for query in queries:
            row, fallback = self.weights_row(query)
            rows.append(row)
            fallbacks += fallback
        if fallbacks:
            logger.warning(f"Local linear fit fell back to Nadaraya-Watson at {fallbacks} of {len(queries)} points")
        return np.vstack(rows)


def llr_predict(reg: LocalLinearRegressor, query) -> LocalPrediction:
    query = np.atleast_1d(np.asarray(query, dtype=np.float64))
    row, fallback = reg.weights_row(query)
    return LocalPrediction(float(row @ reg.targets), fallback)


def loo_error(smoother: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared leave-one-out error of a linear smoother (exact deletion formula)"""
    leverage = np.diag(smoother)
    denominator = 1.0 - leverage
    if np.any(np.abs(denominator) < 1e-10):
        return np.inf
    residuals = (targets - smoother @ targets) / denominator
    return float(np.mean(residuals ** 2))


def _pick_with_tie_break(candidates: Sequence, errors: Sequence[float], scale: float):
    """Smallest error; among ties (within tolerance) the largest candidate"""
    errors = np.asarray(errors, dtype=np.float64)
    best = errors.min()
    if not np.isfinite(best):
        return max(candidates)
    tol = 1e-10 * max(1.0, scale) + 1e-9 * abs(best)
    return max(c for c, e in zip(candidates, errors) if e <= best + tol)


def choose_bandwidth(predictors, targets, grid_of_h: Sequence[float]) -> float:
    if len(grid_of_h) == 0:
        raise InvalidArgumentError("Bandwidth grid is empty")
    if len(grid_of_h) == 1:
        return float(grid_of_h[0])
    targets = np.asarray(targets, dtype=np.float64).ravel()
    errors = []
    for h in grid_of_h:
        reg = LocalLinearRegressor(predictors, targets, float(h))
        errors.append(loo_error(reg.smoother_matrix(), targets))
        logger.debug(f"Bandwidth {h:.4g}: LOO error {errors[-1]:.6g}")
    chosen = float(_pick_with_tie_break([float(h) for h in grid_of_h], errors, float(np.mean(targets ** 2))))
    logger.info(f"Chose bandwidth {chosen:.4g} from {len(grid_of_h)} candidates")
    return chosen


class ConditionalExpectationOperator:
    """A fitted linear smoother used as an operator on sampled functions"""

    def __init__(self, matrix: np.ndarray, bandwidth: float):
        self.matrix = matrix
        self.bandwidth = bandwidth

    @classmethod
    def fit(cls, predictors, bandwidth: float) -> "ConditionalExpectationOperator":
        predictors = np.asarray(predictors, dtype=np.float64)
        dummy = np.zeros(predictors.shape[0])
        return cls(LocalLinearRegressor(predictors, dummy, bandwidth).smoother_matrix(), bandwidth)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values


@dataclass
class LandweberConfig:
    c: float = 0.5
    max_N: int = 100
    chosen_N: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise InvalidArgumentError(f"Landweber step c must lie in (0, 1), got {self.c}")
        if self.max_N < 1:
            raise InvalidArgumentError(f"max_N must be at least 1, got {self.max_N}")

    @property
    def iterations(self) -> int:
        return self.max_N if self.chosen_N is None else self.chosen_N


def landweber_fridman(r: np.ndarray, apply_T: Callable, apply_Tstar: Callable, cfg: LandweberConfig,
                      callback: Optional[Callable[[int, np.ndarray, float], None]] = None) -> np.ndarray:
    """
    phi_0 = c T*(r), then phi_{i+1} = phi_i + c T*(r - T phi_i) for N steps.

    `callback(i, phi_i, residual_norm)` is invoked for every iterate, where
    residual_norm = ||T phi_i - r||.
    """
    r = np.asarray(r, dtype=np.float64)
    phi = cfg.c * apply_Tstar(r)
    for i in range(cfg.iterations + 1):
        residual = r - apply_T(phi)
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(residual))):
            raise NumericalFailure(f"Landweber iterate {i} is not finite; reduce c")
        if callback is not None:
            callback(i, phi, float(np.linalg.norm(residual)))
        if i == cfg.iterations:
            break
        phi = phi + cfg.c * apply_Tstar(residual)
    return phi


def choose_N_loocv(y: np.ndarray, T_matrix: np.ndarray, Tstar_matrix: np.ndarray, cfg: LandweberConfig) -> int:
    """
    Iteration count minimising the leave-one-out error of Y predicted through T.

    With r = T y the reconstruction phi_N = A_N y is linear in y, so the
    prediction T phi_N = (T A_N) y is a linear smoother and the deletion
    formula gives its exact leave-one-out residuals. Ties go to the larger N.
    """
    y = np.asarray(y, dtype=np.float64)
    if cfg.max_N == 1:
        return 1
    c = cfg.c
    A = c * Tstar_matrix @ T_matrix
    errors: List[float] = []
    for _ in range(cfg.max_N):
        A = A + c * Tstar_matrix @ (T_matrix - T_matrix @ A)
        errors.append(loo_error(T_matrix @ A, y))
    chosen = int(_pick_with_tie_break(list(range(1, cfg.max_N + 1)), errors, float(np.mean(y ** 2))))
    logger.info(f"Chose N={chosen} Landweber iterations (max {cfg.max_N})")
    return chosen


@dataclass
class IvResult:
    estimate: np.ndarray
    bandwidth_T: float
    bandwidth_Tstar: float
    chosen_N: int
    residual_norms: List[float] = field(default_factory=list)


def default_bandwidth_grid(predictors: np.ndarray, multipliers: Sequence[float]) -> List[float]:
    """Scale relative multipliers by the predictors' overall spread"""
    predictors = np.atleast_2d(np.asarray(predictors, dtype=np.float64).T).T
    spread = float(np.sqrt(predictors.var(axis=0).sum()))
    return [m * spread for m in multipliers]


def iv_baseline(x: np.ndarray, y: np.ndarray, instruments: np.ndarray, multipliers: Sequence[float],
                cfg: LandweberConfig) -> IvResult:
    """Estimate phi* from Y using instruments W: solve E[phi(X) | W] = E[Y | W]"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h_T = choose_bandwidth(instruments, y, default_bandwidth_grid(instruments, multipliers))
    h_Tstar = choose_bandwidth(x, y, default_bandwidth_grid(x, multipliers))
    T = ConditionalExpectationOperator.fit(instruments, h_T)
    Tstar = ConditionalExpectationOperator.fit(x, h_Tstar)
    r = T(y)
    chosen_N = cfg.chosen_N if cfg.chosen_N is not None else choose_N_loocv(y, T.matrix, Tstar.matrix, cfg)
    run_cfg = LandweberConfig(c=cfg.c, max_N=cfg.max_N, chosen_N=chosen_N)
    residual_norms: List[float] = []
    estimate = landweber_fridman(r, T, Tstar, run_cfg,
                                 callback=lambda i, phi, res: residual_norms.append(res))
    return IvResult(estimate, h_T, h_Tstar, chosen_N, residual_norms)
