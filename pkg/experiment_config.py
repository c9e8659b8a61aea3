"""
Experiment configuration: validated models, shipped presets and builders
turning a config into the numerical objects used by the pipeline
"""
import copy
import hashlib
import json
import logging
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from data_generation import (NoiseModel, NoiseModel1D, NoiseModel2D, PNorm2D,
                             PhaseSchedule, Quadratic1D, Scenario, SinCos2D,
                             SyntheticDataset, amplitude_schedule,
                             frequency_schedule, generate_dataset,
                             test_grid_1d, test_grid_2d, train_grid_1d,
                             train_grid_2d)
from network import NetworkSpec, conv_network, dense_network
from numerics_core import Grid, InvalidArgumentError, SeededRng
from smoothing import GaussianBlur, MovingAverage, SmootherSpec
from trainer import TrainConfig
from transport import SinkhornConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

# child streams of SeededRng(config.seed) used for data; training uses its own
TRAIN_NOISE_STREAM = 10
TEST_SHIFT_STREAM = 11
TEST_NOISE_STREAM = 12
IV_STREAM = 20


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)


class ScenarioConfig(_Section):
    kind: Literal['quadratic1d', 'pnorm2d', 'sincos2d'] = 'quadratic1d'
    p: float = Field(2.0, ge=1)
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0


class NoiseConfig(_Section):
    alpha: float = 2.0
    sigma: float = Field(1.0, ge=0)
    alpha1: float = 0.2
    beta1: float = 0.2
    gamma1: float = 1.0
    alpha2: float = Field(0.5, ge=0)
    beta2: float = Field(0.5, ge=0)
    gamma2: float = Field(0.2, ge=0)


class GridConfig(_Section):
    count: int = Field(1000, ge=2, description="Samples per axis")


class SmootherConfig(_Section):
    kind: Literal['moving_average', 'gaussian_blur'] = 'moving_average'
    taps: int = Field(10, ge=1)
    stddev: float = Field(5.0, gt=0)
    truncation_radius: Optional[int] = Field(None, ge=1)


class NetworkConfig(_Section):
    hidden: int = Field(1000, ge=1, description="Width of the dense hidden layers (1D)")
    kernel: Optional[int] = Field(None, ge=1, description="Square kernel size (2D); defaults to the grid size")
    residual: bool = Field(True, description="Add the input to the network output and start from the identity")


class SinkhornSettings(_Section):
    epsilon: float = Field(1e-4, gt=0)
    max_iters: int = Field(10000, ge=1)
    tol: float = Field(1e-9, gt=0)
    eps_scaling_steps: int = Field(24, ge=1)
    debiased: bool = True
    check_every: int = Field(10, ge=1, description="Iterations between marginal checks")
    level_tol: float = Field(1e-3, gt=0, description="Marginal tolerance above the target epsilon")
    level_max_iters: int = Field(100, ge=1, description="Iteration cap above the target epsilon")


class TrainSettings(_Section):
    lam: float = Field(1.0, ge=0, alias='lambda')
    epochs: int = Field(300, ge=0)
    labeled_fraction: float = Field(0.0, ge=0, le=1)
    learning_rate: float = Field(1e-5, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps_hat: float = Field(1e-8, gt=0)
    w1_solver: Literal['sinkhorn', 'sorted'] = 'sinkhorn'
    log_every: int = Field(100, ge=0)


class IvSettings(_Section):
    k_values: List[int] = Field(default_factory=lambda: [2, 10, 25])
    bandwidth_multipliers: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4, 0.8, 1.6])
    max_N: int = Field(50, ge=1)
    c: float = Field(0.5, gt=0, lt=1)
    coupling: Literal['latent', 'independent'] = Field(
        'latent', description="latent: one factor drives both W and x; independent: W drawn apart from x")
    loading: float = Field(0.5, ge=0, lt=1, description="Weight of the shared factor in every instrument uniform")
    instrument_share: float = Field(0.8, gt=0, le=1,
                                    description="Share of the covariate latent explained by the factor")


class SweepSettings(_Section):
    fractions_percent: List[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    realizations: int = Field(10, ge=2)


class TrackSettings(_Section):
    schedule: Literal['amplitude', 'frequency'] = 'amplitude'
    epochs_per_phase: int = Field(5000, ge=1)


class ChecksSettings(_Section):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    specialist_epochs: Optional[int] = Field(None, ge=1,
                                             description="Epochs of the labels-only specialist (default: train.epochs)")
    slack: float = Field(0.1, ge=0, description="Allowed excess over the bound, as a fraction of its right-hand side")
    lambdas: List[float] = Field(default_factory=lambda: [0.1, 1.0, 10.0], min_length=2)
    comparison_fraction: float = Field(0.01, gt=0, le=1,
                                       description="Labeled fraction of the run the lambda-only run is compared to")


class ExperimentConfig(_Section):
    name: str = 'experiment'
    dimension: Literal[1, 2] = 1
    seed: int = Field(0, ge=0, lt=2 ** 64)
    output_dir: str = 'runs/experiment'
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    smoother: SmootherConfig = Field(default_factory=SmootherConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    sinkhorn: SinkhornSettings = Field(default_factory=SinkhornSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    iv: IvSettings = Field(default_factory=IvSettings)
    sweep: SweepSettings = Field(default_factory=SweepSettings)
    track: TrackSettings = Field(default_factory=TrackSettings)
    checks: ChecksSettings = Field(default_factory=ChecksSettings)

    @model_validator(mode='after')
    def check_dimensions(self):
        scenario_dim = 1 if self.scenario.kind == 'quadratic1d' else 2
        if scenario_dim != self.dimension:
            raise ValueError(f"scenario '{self.scenario.kind}' is {scenario_dim}D but dimension is {self.dimension}")
        smoother_dim = 1 if self.smoother.kind == 'moving_average' else 2
        if smoother_dim != self.dimension:
            raise ValueError(f"smoother '{self.smoother.kind}' is {smoother_dim}D but dimension is {self.dimension}")
        return self

    def to_json_dict(self) -> Dict:
        return self.model_dump(mode='json', by_alias=True)


def config_schema() -> Dict:
    return ExperimentConfig.model_json_schema(by_alias=True)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.to_json_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


PRESETS: Dict[Tuple[str, int], Dict] = {
    ('paper', 1): {
        'name': 'paper-1d',
        'dimension': 1,
        'scenario': {'kind': 'quadratic1d'},
        'grid': {'count': 1000},
        'smoother': {'kind': 'moving_average', 'taps': 10},
        'network': {'hidden': 1000},
        'train': {'lambda': 1.0, 'epochs': 300, 'labeled_fraction': 0.0, 'learning_rate': 1e-5,
                  'w1_solver': 'sorted', 'log_every': 50},
    },
    ('desk', 1): {
        'name': 'desk-1d',
        'dimension': 1,
        'scenario': {'kind': 'quadratic1d'},
        'grid': {'count': 200},
        'smoother': {'kind': 'moving_average', 'taps': 10},
        'network': {'hidden': 200},
        'train': {'lambda': 1.0, 'epochs': 300, 'labeled_fraction': 0.0, 'learning_rate': 1e-4,
                  'w1_solver': 'sorted', 'log_every': 50},
        'iv': {'max_N': 30},
    },
    ('paper', 2): {
        'name': 'paper-2d',
        'dimension': 2,
        'scenario': {'kind': 'pnorm2d', 'p': 2.0},
        'grid': {'count': 100},
        'smoother': {'kind': 'gaussian_blur', 'stddev': 5.0},
        'network': {'kernel': None},
        'train': {'lambda': 1.0, 'epochs': 12000, 'labeled_fraction': 0.01, 'learning_rate': 1e-5,
                  'w1_solver': 'sorted', 'log_every': 500},
        'track': {'schedule': 'amplitude', 'epochs_per_phase': 5000},
    },
    ('desk', 2): {
        'name': 'desk-2d',
        'dimension': 2,
        'scenario': {'kind': 'pnorm2d', 'p': 2.0},
        'grid': {'count': 50},
        'smoother': {'kind': 'gaussian_blur', 'stddev': 2.5},
        'network': {'kernel': None},
        'train': {'lambda': 1.0, 'epochs': 3000, 'labeled_fraction': 0.01, 'learning_rate': 1e-4,
                  'w1_solver': 'sorted', 'log_every': 250},
        'track': {'schedule': 'amplitude', 'epochs_per_phase': 500},
    },
}


def deep_merge(base: Dict, override: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def preset_dict(preset: str, dimension: int) -> Dict:
    try:
        return copy.deepcopy(PRESETS[(preset, int(dimension))])
    except KeyError:
        raise InvalidArgumentError(f"No preset '{preset}' for dimension {dimension}") from None


def load_config(preset: Optional[str] = None, dimension: int = 1, file_data: Optional[Dict] = None,
                overrides: Optional[Dict] = None) -> ExperimentConfig:
    """Preset, then config file, then explicit overrides; validated once at the end"""
    data: Dict = preset_dict(preset, dimension) if preset else {}
    if file_data:
        data = deep_merge(data, file_data)
    if overrides:
        data = deep_merge(data, overrides)
    logger.debug(f"Resolved config (preset={preset}, file keys={sorted(file_data or {})}, "
                 f"overrides={overrides or {}})")
    return ExperimentConfig.model_validate(data)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    s = cfg.scenario
    if s.kind == 'quadratic1d':
        return Quadratic1D()
    if s.kind == 'pnorm2d':
        return PNorm2D(p=s.p)
    return SinCos2D(s.a, s.b, s.c, s.d)


def build_noise(cfg: ExperimentConfig) -> NoiseModel:
    n = cfg.noise
    if cfg.dimension == 1:
        return NoiseModel1D(alpha=n.alpha, sigma=n.sigma)
    return NoiseModel2D(n.alpha1, n.beta1, n.gamma1, n.alpha2, n.beta2, n.gamma2)


def build_grids(cfg: ExperimentConfig) -> Tuple[Grid, Grid]:
    shift_rng = SeededRng(cfg.seed).child(TEST_SHIFT_STREAM)
    if cfg.dimension == 1:
        return train_grid_1d(cfg.grid.count), test_grid_1d(shift_rng, cfg.grid.count)
    return train_grid_2d(cfg.grid.count), test_grid_2d(shift_rng, cfg.grid.count)


def build_smoother(cfg: ExperimentConfig) -> SmootherSpec:
    s = cfg.smoother
    if s.kind == 'moving_average':
        return MovingAverage(s.taps)
    return GaussianBlur(s.stddev, s.truncation_radius)


def build_network(cfg: ExperimentConfig) -> NetworkSpec:
    count = cfg.grid.count
    if cfg.dimension == 1:
        return dense_network(count, cfg.network.hidden, cfg.network.residual)
    kernel = cfg.network.kernel or count
    return conv_network((count, count), (kernel, kernel), cfg.network.residual)


def build_sinkhorn(cfg: ExperimentConfig) -> SinkhornConfig:
    s = cfg.sinkhorn
    return SinkhornConfig(epsilon=s.epsilon, max_iters=s.max_iters, tol=s.tol,
                          eps_scaling_steps=s.eps_scaling_steps, debiased=s.debiased,
                          check_every=s.check_every, level_tol=s.level_tol, level_max_iters=s.level_max_iters)


def build_train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(lam=t.lam, epochs=t.epochs, labeled_fraction=t.labeled_fraction, seed=cfg.seed,
                       sinkhorn=build_sinkhorn(cfg), learning_rate=t.learning_rate, beta1=t.beta1,
                       beta2=t.beta2, eps_hat=t.eps_hat, w1_solver=t.w1_solver, log_every=t.log_every)


def build_schedule(cfg: ExperimentConfig) -> PhaseSchedule:
    if cfg.track.schedule == 'amplitude':
        return amplitude_schedule(cfg.track.epochs_per_phase)
    return frequency_schedule(cfg.track.epochs_per_phase)


def generate_experiment_data(cfg: ExperimentConfig,
                             scenario: Optional[Scenario] = None) -> Tuple[SyntheticDataset, SyntheticDataset]:
    """Training and shifted-test datasets, deterministic in (config, seed)"""
    scenario = scenario or build_scenario(cfg)
    noise = build_noise(cfg)
    train_grid, test_grid = build_grids(cfg)
    base = SeededRng(cfg.seed)
    train_ds = generate_dataset(scenario, noise, train_grid, base.child(TRAIN_NOISE_STREAM))
    test_ds = generate_dataset(scenario, noise, test_grid, base.child(TEST_NOISE_STREAM))
    return train_ds, test_ds
