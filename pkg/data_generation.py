"""
Synthetic datasets: fair score functions, endogenous noise, grids,
time-varying schedules and the instrumental-variable recipe
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.stats import norm

from numerics_core import (ArityMismatchError, Field, Grid, Grid1D, Grid2D,
                           InvalidArgumentError, SeededRng, field_points,
                           linspace, make_field)

logger = logging.getLogger(__name__)

# Half-width of the truncated-normal instrument support
IV_SIGMA = 1.853

TRAIN_INTERVAL = (-3.0, 3.0)
TEST_SHIFT_HALF_WIDTH = 0.5


@dataclass(frozen=True)
class NoiseModel1D:
    """U(x) ~ Normal(alpha * x, sigma)"""
    alpha: float = 2.0
    sigma: float = 1.0

    arity = 1

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgumentError(f"Noise standard deviation must be >= 0, got {self.sigma}")

    def mean(self, points: np.ndarray) -> np.ndarray:
        return self.alpha * points[:, 0]

    def std(self, points: np.ndarray) -> np.ndarray:
        return np.full(points.shape[0], float(self.sigma))

    def to_dict(self) -> Dict[str, float]:
        return {'kind': 'noise1d', 'alpha': self.alpha, 'sigma': self.sigma}


@dataclass(frozen=True)
class NoiseModel2D:
    """
    Mean  alpha1*x1 + beta1*x2 + gamma1*x1*x2
    Std   alpha2*|x1| + beta2*|x2| + gamma2*|x1|*|x2|
    """
    alpha1: float = 0.2
    beta1: float = 0.2
    gamma1: float = 1.0
    alpha2: float = 0.5
    beta2: float = 0.5
    gamma2: float = 0.2

    arity = 2

    def mean(self, points: np.ndarray) -> np.ndarray:
        x1, x2 = points[:, 0], points[:, 1]
        return self.alpha1 * x1 + self.beta1 * x2 + self.gamma1 * x1 * x2

    def std(self, points: np.ndarray) -> np.ndarray:
        a1, a2 = np.abs(points[:, 0]), np.abs(points[:, 1])
        return self.alpha2 * a1 + self.beta2 * a2 + self.gamma2 * a1 * a2

    def to_dict(self) -> Dict[str, float]:
        return {'kind': 'noise2d', 'alpha1': self.alpha1, 'beta1': self.beta1, 'gamma1': self.gamma1,
                'alpha2': self.alpha2, 'beta2': self.beta2, 'gamma2': self.gamma2}


NoiseModel = Union[NoiseModel1D, NoiseModel2D]


def standard_noise_1d() -> NoiseModel1D:
    return NoiseModel1D(alpha=2.0, sigma=1.0)


def standard_noise_2d() -> NoiseModel2D:
    return NoiseModel2D(0.2, 0.2, 1.0, 0.5, 0.5, 0.2)


def noise_from_dict(data: Dict) -> NoiseModel:
    kind = data.get('kind')
    coefficients = {key: float(value) for key, value in data.items() if key != 'kind'}
    if kind == 'noise1d':
        return NoiseModel1D(**coefficients)
    if kind == 'noise2d':
        return NoiseModel2D(**coefficients)
    raise InvalidArgumentError(f"Unknown noise model kind: {kind}")


@dataclass(frozen=True)
class Quadratic1D:
    arity = 1

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return points[:, 0] ** 2

    def to_dict(self) -> Dict:
        return {'kind': 'quadratic1d'}


@dataclass(frozen=True)
class PNorm2D:
    p: float = 2.0

    arity = 2

    def __post_init__(self):
        if self.p < 1:
            raise InvalidArgumentError(f"p-norm exponent must be >= 1, got {self.p}")

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return (np.abs(points[:, 0]) ** self.p + np.abs(points[:, 1]) ** self.p) ** (1.0 / self.p)

    def to_dict(self) -> Dict:
        return {'kind': 'pnorm2d', 'p': self.p}


@dataclass(frozen=True)
class SinCos2D:
    """a*sin(b*x1^2) + c*cos(d*x2^2)"""
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0

    arity = 2

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        x1, x2 = points[:, 0], points[:, 1]
        return self.a * np.sin(self.b * x1 ** 2) + self.c * np.cos(self.d * x2 ** 2)

    def to_dict(self) -> Dict:
        return {'kind': 'sincos2d', 'a': self.a, 'b': self.b, 'c': self.c, 'd': self.d}


@dataclass(frozen=True)
class CustomScenario:
    """Wraps any vectorised callable taking an (n, arity) array of coordinates"""
    function: Callable[[np.ndarray], np.ndarray]
    arity: int = 1
    name: str = 'custom'

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.function(points), dtype=np.float64)

    def to_dict(self) -> Dict:
        return {'kind': 'custom', 'name': self.name, 'arity': self.arity}


Scenario = Union[Quadratic1D, PNorm2D, SinCos2D, CustomScenario]


def scenario_from_dict(data: Dict) -> Scenario:
    kind = data.get('kind')
    if kind == 'quadratic1d':
        return Quadratic1D()
    if kind == 'pnorm2d':
        return PNorm2D(p=float(data.get('p', 2.0)))
    if kind == 'sincos2d':
        return SinCos2D(*(float(data.get(key, 1.0)) for key in 'abcd'))
    raise InvalidArgumentError(f"Unknown scenario kind: {kind}")


def _check_arity(arity: int, grid: Grid, what: str):
    if arity != grid.ndim:
        raise ArityMismatchError(f"{what} has arity {arity} but the grid is {grid.ndim}D")


def eval_scenario(scenario: Scenario, grid: Grid) -> Field:
    _check_arity(scenario.arity, grid, type(scenario).__name__)
    return make_field(grid, scenario.evaluate(field_points(grid)))


def corrupt(phi: Field, noise: NoiseModel, rng: SeededRng) -> Field:
    """Y = phi* + U with U(x) ~ Normal(mu(x), sigma(x))"""
    _check_arity(noise.arity, phi.grid, type(noise).__name__)
    points = field_points(phi.grid)
    mu = noise.mean(points)
    sigma = noise.std(points)
    if np.any(sigma < 0):
        raise InvalidArgumentError(f"Noise model produced a negative standard deviation ({sigma.min():.4g})")
    bias = rng.normal(mu, sigma)
    return phi.with_values(phi.values + bias)


def _draw_shift(rng: SeededRng, shift: Optional[float]) -> float:
    if shift is not None:
        return float(shift)
    if rng is None:
        raise InvalidArgumentError("A random stream is needed to draw the test-grid shift")
    return float(rng.uniform(-TEST_SHIFT_HALF_WIDTH, TEST_SHIFT_HALF_WIDTH))


def train_grid_1d(count: int = 1000) -> Grid1D:
    return linspace(TRAIN_INTERVAL[0], TRAIN_INTERVAL[1], count)


def test_grid_1d(rng: Optional[SeededRng] = None, count: int = 1000, shift: Optional[float] = None) -> Grid1D:
    """Training grid translated by one epsilon ~ U(-0.5, 0.5)"""
    return train_grid_1d(count).shifted(_draw_shift(rng, shift))


def train_grid_2d(count: int = 100) -> Grid2D:
    axis = train_grid_1d(count)
    return Grid2D(axis, axis)


def test_grid_2d(rng: Optional[SeededRng] = None, count: int = 100, shift: Optional[float] = None) -> Grid2D:
    # one epsilon shared by both axes
    return train_grid_2d(count).shifted(_draw_shift(rng, shift))


# keep pytest from collecting the two test-grid builders above
test_grid_1d.__test__ = False
test_grid_2d.__test__ = False


@dataclass
class IvMatrix:
    """n observations of k instruments, each entry in [-IV_SIGMA, IV_SIGMA]"""
    entries: np.ndarray
    tau: np.ndarray
    eps: np.ndarray

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def columns(self) -> int:
        return self.entries.shape[1]


def iv_from_uniforms(e: np.ndarray) -> IvMatrix:
    """Apply the three-step instrument recipe to an (n, k) array of U(0,1) draws"""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    k = e.shape[1]
    eps = np.sqrt(k / 2.0) * e / e.sum(axis=1, keepdims=True)
    tau = np.cumsum(e, axis=1) / np.arange(1, k + 1)
    lower, upper = norm.cdf(-1.0), norm.cdf(1.0)
    entries = norm.ppf(lower + tau * (upper - lower)) * IV_SIGMA
    return IvMatrix(entries=entries, tau=tau, eps=eps)


def gen_iv(k: int, n: int, rng: SeededRng) -> IvMatrix:
    if k < 1 or n < 1:
        raise InvalidArgumentError(f"Need k >= 1 and n >= 1 instruments, got k={k}, n={n}")
    e = rng.uniform(0.0, 1.0, size=(n, k))
    return iv_from_uniforms(e)


def gen_iv_latent(k: int, n: int, loading: float, rng: SeededRng) -> Tuple[IvMatrix, np.ndarray]:
    """
    Instruments whose uniforms share one standard-normal factor z per row.

    e_l = Phi(loading * z + sqrt(1 - loading^2) * xi_l) is still U(0, 1) for
    every l, so the three-step recipe applies unchanged; the running means
    then pin z down more tightly the more columns a row has.
    """
    if k < 1 or n < 1:
        raise InvalidArgumentError(f"Need k >= 1 and n >= 1 instruments, got k={k}, n={n}")
    if not 0.0 <= loading < 1.0:
        raise InvalidArgumentError(f"Instrument loading must lie in [0, 1), got {loading}")
    z = rng.normal(size=n)
    xi = rng.normal(size=(n, k))
    e = norm.cdf(loading * z[:, None] + np.sqrt(1.0 - loading ** 2) * xi)
    return iv_from_uniforms(e), z


@dataclass
class IvSample:
    phi_star: Field
    y: Field
    instruments: IvMatrix


def iv_sample(scenario: Scenario, noise: NoiseModel, grid: Grid1D, k: int, rng: SeededRng,
              loading: float = 0.5, share: float = 0.8) -> IvSample:
    """
    Observations for the instrumental-variable baseline, with the instruments
    driving the covariate.

    Each row draws an instrument factor z and an independent endogenous
    shock v. The latent sqrt(share) * z + sqrt(1 - share) * v ranks the rows
    onto the grid, so x is monotone in it. The noise model is evaluated at v
    mapped onto the grid interval instead of at x, which keeps U correlated
    with x while E[U | W] = 0 for a noise mean that is odd in its argument.
    """
    _check_arity(scenario.arity, grid, type(scenario).__name__)
    _check_arity(noise.arity, grid, type(noise).__name__)
    if not 0.0 < share <= 1.0:
        raise InvalidArgumentError(f"Instrument share must lie in (0, 1], got {share}")
    n = grid.size
    instruments, z = gen_iv_latent(k, n, loading, rng)
    shock = rng.normal(size=n)
    order = np.argsort(np.sqrt(share) * z + np.sqrt(1.0 - share) * shock, kind='stable')
    ranked = IvMatrix(entries=instruments.entries[order], tau=instruments.tau[order], eps=instruments.eps[order])
    endogenous = (grid.start + (grid.stop - grid.start) * norm.cdf(shock[order]))[:, None]
    sigma = noise.std(endogenous)
    if np.any(sigma < 0):
        raise InvalidArgumentError(f"Noise model produced a negative standard deviation ({sigma.min():.4g})")
    phi_star = eval_scenario(scenario, grid)
    y = phi_star.with_values(phi_star.values + rng.normal(noise.mean(endogenous), sigma))
    return IvSample(phi_star=phi_star, y=y, instruments=ranked)


@dataclass
class PhaseSchedule:
    phases: List[Tuple[Scenario, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.phases:
            raise InvalidArgumentError("A phase schedule needs at least one phase")
        for _, epochs in self.phases:
            if epochs < 1:
                raise InvalidArgumentError(f"Phase epoch counts must be positive, got {epochs}")

    @property
    def total_epochs(self) -> int:
        return sum(epochs for _, epochs in self.phases)

    @property
    def boundaries(self) -> List[int]:
        """Epoch counts after which a new phase starts"""
        return list(np.cumsum([epochs for _, epochs in self.phases])[:-1].astype(int))


def amplitude_schedule(epochs_per_phase: int = 5000) -> PhaseSchedule:
    coefficients = [(0.25, 1.75), (0.5, 1.5), (1.0, 1.5), (1.0, 1.0)]
    return PhaseSchedule([(SinCos2D(a, 1.0, c, 1.0), epochs_per_phase) for a, c in coefficients])


def frequency_schedule(epochs_per_phase: int = 10000) -> PhaseSchedule:
    return PhaseSchedule([(SinCos2D(1.0, float(k), 1.0, float(k)), epochs_per_phase) for k in range(1, 5)])


@dataclass
class SyntheticDataset:
    phi_star: Field
    y: Field
    scenario: Scenario
    noise: NoiseModel
    seed: int

    def meta(self) -> Dict:
        return {'scenario': self.scenario.to_dict(), 'noise': self.noise.to_dict(), 'seed': self.seed}


def generate_dataset(scenario: Scenario, noise: NoiseModel, grid: Grid, rng: SeededRng) -> SyntheticDataset:
    phi_star = eval_scenario(scenario, grid)
    y = corrupt(phi_star, noise, rng)
    logger.info(f"Generated {type(scenario).__name__} dataset with {grid.size} samples (seed {rng.seed})")
    return SyntheticDataset(phi_star=phi_star, y=y, scenario=scenario, noise=noise, seed=rng.seed)
