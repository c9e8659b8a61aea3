"""
Weakly supervised training of the refinement network.

Loss per epoch (full batch over the whole signal):

    sum_{i in labeled} (phi*_i - phi_hat_i)^2 + lambda * W1(P(phi*), P(phi_hat))

The supervised term is an unnormalised sum. The target distribution is
built from the sorted phi* values only, so the grid alignment of phi*
reaches the loss exclusively through the labeled indices.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data_generation import PhaseSchedule, eval_scenario
from network import (AdamState, NetworkSpec, ParamStore, adam_step, backward,
                     forward, init_params)
from numerics_core import (EmpiricalDistribution, Field, InvalidArgumentError,
                           SeededRng, TrainingDiverged, empirical)
from smoothing import SmootherSpec, smooth
from transport import (SinkhornConfig, exact_w1_1d, exact_w1_grad_1d,
                       sinkhorn_w1_with_grad, solve_self_transport)

logger = logging.getLogger(__name__)

W1_SOLVERS = ('sinkhorn', 'sorted')

# streams derived from TrainConfig.seed
LABEL_STREAM = 1
INIT_STREAM = 2


@dataclass
class TrainConfig:
    lam: float = 1.0
    epochs: int = 300
    labeled_fraction: float = 0.0
    seed: int = 0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    w1_solver: str = 'sinkhorn'
    log_every: int = 100

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise InvalidArgumentError(f"labeled_fraction must lie in [0, 1], got {self.labeled_fraction}")
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.w1_solver not in W1_SOLVERS:
            raise InvalidArgumentError(f"w1_solver must be one of {W1_SOLVERS}, got {self.w1_solver}")

    def adam_state(self) -> AdamState:
        return AdamState(lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps_hat=self.eps_hat)


@dataclass(frozen=True)
class LabeledSet:
    indices: np.ndarray

    def __len__(self):
        return int(self.indices.size)


class LossBreakdown(NamedTuple):
    total: float
    supervised: float
    wasserstein: float


class LossTrace:
    """Per-epoch loss history, optionally annotated with phase numbers"""

    COLUMNS = ['epoch', 'combined', 'wasserstein', 'supervised']

    def __init__(self):
        self.records: List[Dict] = []
        self.boundaries: List[int] = []

    def append(self, epoch: int, loss: LossBreakdown, phase: Optional[int] = None):
        record = {'epoch': epoch, 'combined': loss.total, 'wasserstein': loss.wasserstein,
                  'supervised': loss.supervised}
        if phase is not None:
            record['phase'] = phase
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def last(self) -> Dict:
        return self.records[-1]

    def to_frame(self) -> pd.DataFrame:
        has_phase = any('phase' in record for record in self.records)
        columns = self.COLUMNS + (['phase'] if has_phase else [])
        return pd.DataFrame(self.records, columns=columns)


def select_labeled(T: int, fraction: float, rng: SeededRng) -> LabeledSet:
    if not 0.0 <= fraction <= 1.0:
        raise InvalidArgumentError(f"Labeled fraction must lie in [0, 1], got {fraction}")
    # the small offset keeps products such as 0.29 * 100 from flooring to 28
    size = min(T, int(math.floor(fraction * T + 1e-9)))
    return LabeledSet(np.sort(rng.choice(T, size)).astype(np.int64))


def target_distribution(phi_star: Field) -> EmpiricalDistribution:
    return empirical(np.sort(phi_star.values))


def _w1_and_grad(pred: np.ndarray, target: EmpiricalDistribution, sinkhorn: SinkhornConfig, solver: str,
                 target_self=None) -> Tuple[float, np.ndarray]:
    if solver == 'sorted':
        predicted = EmpiricalDistribution(pred)
        return exact_w1_1d(predicted, target), exact_w1_grad_1d(predicted, target)
    result, grad = sinkhorn_w1_with_grad(pred, target.atoms, sinkhorn, b_self=target_self)
    if not result.converged:
        logger.warning(f"Sinkhorn did not converge ({result.iterations_used} iterations); using last potentials")
    return result.cost, grad


def _loss_and_grad(pred: np.ndarray, labeled: LabeledSet, labeled_values: np.ndarray,
                   target: EmpiricalDistribution, lam: float, sinkhorn: SinkhornConfig, solver: str,
                   target_self=None) -> Tuple[LossBreakdown, np.ndarray]:
    residual = pred[labeled.indices] - labeled_values
    supervised = float(np.dot(residual, residual))
    w1, w1_grad = _w1_and_grad(pred, target, sinkhorn, solver, target_self)
    grad = lam * w1_grad
    grad[labeled.indices] += 2.0 * residual
    return LossBreakdown(supervised + lam * w1, supervised, w1), grad


def combined_loss(phi_hat: Field, phi_star: Field, labeled: LabeledSet, target: EmpiricalDistribution,
                  lam: float, sinkhorn_cfg: SinkhornConfig = SinkhornConfig(),
                  w1_solver: str = 'sinkhorn') -> LossBreakdown:
    if phi_hat.grid != phi_star.grid:
        raise InvalidArgumentError("phi_hat and phi_star must share a grid")
    loss, _ = _loss_and_grad(phi_hat.values, labeled, phi_star.values[labeled.indices], target, lam,
                             sinkhorn_cfg, w1_solver)
    return loss


def predict_field(net: NetworkSpec, params: ParamStore, phi_tilde: Field) -> Field:
    return phi_tilde.with_values(forward(net, params, phi_tilde.image).ravel())


class WeaklySupervisedTrainer:
    """Owns the parameters, Adam state and loss trace of one training run"""

    def __init__(self, net: NetworkSpec, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.rng = SeededRng(cfg.seed)
        self.params = init_params(net, self.rng.child(INIT_STREAM))
        self.adam = cfg.adam_state()
        self.trace = LossTrace()
        self.epoch = 0

    def labeled_set(self, T: int) -> LabeledSet:
        return select_labeled(T, self.cfg.labeled_fraction, self.rng.child(LABEL_STREAM))

    def fit_phase(self, phi_tilde: Field, phi_star: Field, labeled: LabeledSet, epochs: int,
                  phase: Optional[int] = None):
        cfg = self.cfg
        target = target_distribution(phi_star)
        labeled_values = phi_star.values[labeled.indices]
        target_self = None
        if cfg.w1_solver == 'sinkhorn' and cfg.sinkhorn.debiased:
            target_self = solve_self_transport(target.atoms, cfg.sinkhorn)
        net_input = phi_tilde.image
        logger.info(f"Training {epochs} epochs (lambda={cfg.lam}, {len(labeled)} labeled of {phi_star.values.size}, "
                    f"solver={cfg.w1_solver}{'' if phase is None else f', phase {phase}'})")
        for _ in range(epochs):
            pred = forward(self.net, self.params, net_input).ravel()
            if not np.all(np.isfinite(pred)):
                raise TrainingDiverged(f"Network output became non-finite at epoch {self.epoch + 1}",
                                       last_params=self.params.copy(), trace=self.trace)
            loss, pred_grad = _loss_and_grad(pred, labeled, labeled_values, target, cfg.lam, cfg.sinkhorn,
                                             cfg.w1_solver, target_self)
            if not (math.isfinite(loss.total) and np.all(np.isfinite(pred_grad))):
                raise TrainingDiverged(f"Loss became non-finite at epoch {self.epoch + 1}",
                                       last_params=self.params.copy(), trace=self.trace)
            self.epoch += 1
            self.trace.append(self.epoch, loss, phase)
            param_grads, _ = backward(self.net, self.params, net_input, pred_grad)
            updated = adam_step(self.adam, self.params, param_grads)
            if not updated.is_finite():
                raise TrainingDiverged(f"Parameters became non-finite at epoch {self.epoch}",
                                       last_params=self.params.copy(), trace=self.trace)
            self.params = updated
            if cfg.log_every and self.epoch % cfg.log_every == 0:
                logger.info(f"Epoch {self.epoch}: combined={loss.total:.6g} "
                            f"wasserstein={loss.wasserstein:.6g} supervised={loss.supervised:.6g}")
        if phase is not None:
            self.trace.boundaries.append(self.epoch)


def train(y: Field, smoother: SmootherSpec, phi_star: Field, net: NetworkSpec,
          cfg: TrainConfig) -> Tuple[ParamStore, LossTrace]:
    phi_tilde = smooth(y, smoother)
    trainer = WeaklySupervisedTrainer(net, cfg)
    labeled = trainer.labeled_set(phi_star.values.size)
    try:
        trainer.fit_phase(phi_tilde, phi_star, labeled, cfg.epochs)
    except TrainingDiverged as exc:
        logger.error(f"Training failed: {exc}")
        raise
    return trainer.params, trainer.trace


def train_time_varying(y_schedule: Sequence[Field], schedule: PhaseSchedule, smoother: SmootherSpec,
                       net: NetworkSpec, cfg: TrainConfig) -> Tuple[ParamStore, LossTrace]:
    """
    One network tracks a sequence of fair score functions.

    Parameters and optimiser state carry over between phases; the labeled
    individuals stay the same while their reference values and the target
    distribution switch at each boundary.
    """
    if len(y_schedule) != len(schedule.phases):
        raise InvalidArgumentError(f"Got {len(y_schedule)} observed fields for {len(schedule.phases)} phases")
    trainer = WeaklySupervisedTrainer(net, cfg)
    labeled = trainer.labeled_set(y_schedule[0].values.size)
    for phase, (y, (scenario, epochs)) in enumerate(zip(y_schedule, schedule.phases)):
        phi_star = eval_scenario(scenario, y.grid)
        trainer.fit_phase(smooth(y, smoother), phi_star, labeled, epochs, phase=phase)
    # the last entry marks the end of training, not a phase switch
    trainer.trace.boundaries = trainer.trace.boundaries[:-1]
    return trainer.params, trainer.trace


def specialist_config(cfg: TrainConfig, kind: str) -> TrainConfig:
    """Config for a model minimising only one term: 'labeled' or 'wasserstein'"""
    if kind == 'labeled':
        return replace(cfg, lam=0.0)
    if kind == 'wasserstein':
        return replace(cfg, labeled_fraction=0.0, lam=cfg.lam if cfg.lam > 0 else 1.0)
    raise InvalidArgumentError(f"Unknown specialist kind: {kind}")


@dataclass
class GapCheckResult:
    kind: str
    lhs: float
    rhs: float
    satisfied: bool
    applicable: bool


MEMBERSHIP_THRESHOLDS = {'labeled': 1e-6, 'wasserstein': 1e-4}


def minimiser_gap_check(net: NetworkSpec, phi_tilde: Field, phi_star: Field, params_star: ParamStore,
                        specialist_params: ParamStore, labeled: LabeledSet, lam: float, kind: str,
                        sinkhorn_cfg: SinkhornConfig = SinkhornConfig(), w1_solver: str = 'sorted',
                        slack: float = 0.1) -> GapCheckResult:
    """
    Check the bound a minimiser of the combined loss owes to a one-term specialist.

    kind='labeled'     (specialist fits the labels): supervised(theta*) <= lambda * W1(specialist)
    kind='wasserstein' (specialist matches the distribution): W1(theta*) <= supervised(specialist) / lambda
    `slack` is a fraction of the right-hand side allowed for approximate minimisation.
    """
    if kind not in MEMBERSHIP_THRESHOLDS:
        raise InvalidArgumentError(f"Unknown specialist kind: {kind}")
    target = target_distribution(phi_star)

    def evaluate(params: ParamStore) -> LossBreakdown:
        return combined_loss(predict_field(net, params, phi_tilde), phi_star, labeled, target, lam,
                             sinkhorn_cfg, w1_solver)

    star = evaluate(params_star)
    specialist = evaluate(specialist_params)
    threshold = MEMBERSHIP_THRESHOLDS[kind]
    if kind == 'labeled':
        applicable = specialist.supervised <= threshold
        lhs, rhs = star.supervised, lam * specialist.wasserstein
    else:
        applicable = specialist.wasserstein <= threshold and lam > 0
        lhs = star.wasserstein
        rhs = specialist.supervised / lam if lam > 0 else math.inf
    if not applicable:
        logger.warning(f"Specialist is outside the '{kind}' set (threshold {threshold:g}); bound not checked")
        return GapCheckResult(kind, lhs, rhs, False, False)
    satisfied = lhs <= rhs * (1.0 + slack) + threshold
    return GapCheckResult(kind, lhs, rhs, bool(satisfied), True)
