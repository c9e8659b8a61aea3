"""
Metrics, single-run evaluation, the labeled-fraction sweep and the
consistency checks run by the `checks` command
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from data_generation import Scenario, SyntheticDataset, gen_iv, iv_sample
from experiment_config import (IV_STREAM, ExperimentConfig, build_grids,
                               build_network, build_noise, build_scenario,
                               build_smoother, build_train_config,
                               generate_experiment_data)
from iv_regression import IvResult, LandweberConfig, iv_baseline
from network import ParamStore
from numerics_core import (EndofairError, Field, InvalidArgumentError,
                           SeededRng, empirical, error_norm, field_points,
                           mse)
from smoothing import smooth
from trainer import (LABEL_STREAM, LossTrace, minimiser_gap_check,
                     predict_field, select_labeled, specialist_config,
                     target_distribution, train)
from transport import exact_w1_1d

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['fraction', 'realization', 'seed', 'train_mse', 'test_mse', 'train_error_norm',
                 'test_error_norm', 'final_w1', 'status']
AGGREGATE_COLUMNS = ['fraction', 'train_mean', 'train_std', 'test_mean', 'test_std']


def evaluate_estimate(estimate: Field, phi_star: Field) -> Dict[str, float]:
    """MSE, error norm (sum of squares) and exact W1 of an estimate against the fair scores"""
    return {
        'mse': mse(estimate, phi_star),
        'error_norm': error_norm(estimate, phi_star),
        'w1': exact_w1_1d(empirical(estimate), target_distribution(phi_star)),
    }


def rearrangement_floor(smoothed: Field, phi_star: Field) -> float:
    """
    MSE of the estimate that keeps the order of the smoothed scores and has
    the fair score distribution: sorted fair scores placed by rank.
    Distribution matching alone cannot undo an ordering that smoothing broke,
    so a Wasserstein-only fit started from the smoothed scores ends near here.
    """
    order = np.argsort(smoothed.values, kind='stable')
    placed = np.empty(order.size)
    placed[order] = np.sort(phi_star.values)
    return mse(phi_star.with_values(placed), phi_star)


def score_metrics(estimate: Field, smoothed: Field, phi_star: Field) -> Dict[str, float]:
    metrics = evaluate_estimate(estimate, phi_star)
    metrics['rearrangement_floor'] = rearrangement_floor(smoothed, phi_star)
    return metrics


@dataclass
class ExperimentOutcome:
    params: ParamStore
    trace: LossTrace
    train_data: SyntheticDataset
    test_data: SyntheticDataset
    train_estimate: Field
    test_estimate: Field
    metrics: Dict[str, float]


def run_single_experiment(cfg: ExperimentConfig, scenario: Optional[Scenario] = None) -> ExperimentOutcome:
    """Train on the training grid and evaluate on both the training and the shifted test grid"""
    train_data, test_data = generate_experiment_data(cfg, scenario)
    smoother = build_smoother(cfg)
    net = build_network(cfg)
    params, trace = train(train_data.y, smoother, train_data.phi_star, net, build_train_config(cfg))
    train_smoothed, test_smoothed = smooth(train_data.y, smoother), smooth(test_data.y, smoother)
    train_estimate = predict_field(net, params, train_smoothed)
    test_estimate = predict_field(net, params, test_smoothed)
    train_metrics = score_metrics(train_estimate, train_smoothed, train_data.phi_star)
    test_metrics = score_metrics(test_estimate, test_smoothed, test_data.phi_star)
    metrics = {f'train_{key}': value for key, value in train_metrics.items()}
    metrics.update({f'test_{key}': value for key, value in test_metrics.items()})
    logger.info(f"Run finished: train MSE {metrics['train_mse']:.6g}, test MSE {metrics['test_mse']:.6g}")
    return ExperimentOutcome(params, trace, train_data, test_data, train_estimate, test_estimate, metrics)


IV_COLUMNS = ['k', 'bandwidth_T', 'bandwidth_Tstar', 'chosen_N', 'error_norm', 'mse']


@dataclass
class IvRun:
    k: int
    result: IvResult
    estimate: Field
    phi_star: Field
    metrics: Dict[str, float]


def run_iv_experiment(cfg: ExperimentConfig) -> List[IvRun]:
    """
    Instrumental-variable baseline for every instrument count in cfg.iv.

    With the latent coupling each k gets its own sample from `iv_sample`;
    with the independent coupling the training dataset is shared and only
    the instruments change.
    """
    iv_cfg = cfg.iv
    base = SeededRng(cfg.seed)
    landweber = LandweberConfig(c=iv_cfg.c, max_N=iv_cfg.max_N)
    if iv_cfg.coupling == 'latent':
        if cfg.dimension != 1:
            raise InvalidArgumentError("The latent instrument coupling is defined for 1D scores only")
        train_grid, _ = build_grids(cfg)
        scenario, noise = build_scenario(cfg), build_noise(cfg)
    else:
        shared, _ = generate_experiment_data(cfg)
    runs = []
    for k in iv_cfg.k_values:
        rng = base.child(IV_STREAM + k)
        if iv_cfg.coupling == 'latent':
            sample = iv_sample(scenario, noise, train_grid, k, rng, iv_cfg.loading, iv_cfg.instrument_share)
            phi_star, y, instruments = sample.phi_star, sample.y, sample.instruments.entries
        else:
            phi_star, y = shared.phi_star, shared.y
            instruments = gen_iv(k, y.grid.size, rng).entries
        result = iv_baseline(field_points(y.grid), y.values, instruments, iv_cfg.bandwidth_multipliers, landweber)
        estimate = phi_star.with_values(result.estimate)
        metrics = evaluate_estimate(estimate, phi_star)
        logger.info(f"IV baseline k={k}: h_T={result.bandwidth_T:.4g}, N={result.chosen_N}, "
                    f"error norm {metrics['error_norm']:.6g}")
        runs.append(IvRun(k, result, estimate, phi_star, metrics))
    return runs


def iv_table(runs: Sequence[IvRun]) -> pd.DataFrame:
    rows = [{'k': run.k, 'bandwidth_T': run.result.bandwidth_T, 'bandwidth_Tstar': run.result.bandwidth_Tstar,
             'chosen_N': run.result.chosen_N, 'error_norm': run.metrics['error_norm'], 'mse': run.metrics['mse']}
            for run in runs]
    return pd.DataFrame(rows, columns=IV_COLUMNS)


def iv_diagnostics(runs: Sequence[IvRun]) -> Dict:
    """Chosen bandwidths, iteration count and Landweber residual norms per instrument count"""
    return {'runs': [{'k': run.k,
                      'bandwidth_T': run.result.bandwidth_T,
                      'bandwidth_Tstar': run.result.bandwidth_Tstar,
                      'chosen_N': run.result.chosen_N,
                      'residual_norms': [float(r) for r in run.result.residual_norms],
                      'error_norm': run.metrics['error_norm']}
                     for run in runs]}


def cell_seed(base_seed: int, cell_index: int) -> int:
    """Seed of one sweep cell, derived from the base seed and the cell's position"""
    return int(SeededRng(base_seed).child(cell_index).generator.integers(0, 2 ** 63))


def thread_limit() -> int:
    raw = os.environ.get('ENDOFAIR_THREADS', '1')
    try:
        value = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"ENDOFAIR_THREADS must be an integer, got {raw!r}") from None
    return max(1, value)


def _run_cell(cell: Dict) -> Dict:
    row = {'fraction': cell['fraction'], 'realization': cell['realization'], 'seed': cell['seed']}
    try:
        outcome = run_single_experiment(cell['config'], cell['scenario'])
    except EndofairError as exc:
        logger.warning(f"Sweep cell fraction={cell['fraction']}% realization={cell['realization']} failed: {exc}")
        row.update({'train_mse': np.nan, 'test_mse': np.nan, 'train_error_norm': np.nan,
                    'test_error_norm': np.nan, 'final_w1': np.nan, 'status': 'failed'})
        return row
    m = outcome.metrics
    row.update({'train_mse': m['train_mse'], 'test_mse': m['test_mse'], 'train_error_norm': m['train_error_norm'],
                'test_error_norm': m['test_error_norm'], 'final_w1': m['train_w1'], 'status': 'ok'})
    return row


def sweep(scenario: Optional[Scenario], fractions: Sequence[float], realizations: int,
          base_cfg: ExperimentConfig) -> pd.DataFrame:
    """
    Independent seeded runs for every (fraction, realization) cell.

    Fractions are percentages of the training samples that carry labels.
    Cells run in worker processes when ENDOFAIR_THREADS allows more than one.
    """
    if realizations < 2:
        raise InvalidArgumentError(f"A sweep needs at least 2 realizations, got {realizations}")
    if len(fractions) == 0:
        raise InvalidArgumentError("A sweep needs at least one labeled fraction")
    for fraction in fractions:
        if not 0.0 <= fraction <= 100.0:
            raise InvalidArgumentError(f"Labeled fractions are percentages in [0, 100], got {fraction}")

    cells = []
    for f_index, fraction in enumerate(fractions):
        for realization in range(realizations):
            seed = cell_seed(base_cfg.seed, f_index * realizations + realization)
            train_update = {'labeled_fraction': float(fraction) / 100.0}
            cfg = base_cfg.model_copy(update={'seed': seed,
                                              'train': base_cfg.train.model_copy(update=train_update)})
            cells.append({'fraction': float(fraction), 'realization': realization, 'seed': seed,
                          'config': cfg, 'scenario': scenario})

    workers = min(thread_limit(), len(cells))
    logger.info(f"Sweeping {len(fractions)} fractions x {realizations} realizations on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(cell) for cell in cells]

    result = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    failed = int((result['status'] != 'ok').sum())
    if failed:
        logger.warning(f"{failed} of {len(result)} sweep runs failed and are excluded from the aggregates")
    return result


def summarize(result: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and sample standard deviation of train/test MSE per fraction.

    Failed runs are excluded. A fraction with a single successful run
    reports std 0 with std_defined False.
    """
    ok = result[result['status'] == 'ok'] if 'status' in result.columns else result
    if ok.empty:
        raise InvalidArgumentError("Nothing to summarize: no successful runs")
    grouped = ok.groupby('fraction', sort=True)
    summary = pd.DataFrame({
        'train_mean': grouped['train_mse'].mean(),
        'train_std': grouped['train_mse'].std(ddof=1),
        'test_mean': grouped['test_mse'].mean(),
        'test_std': grouped['test_mse'].std(ddof=1),
        'n_runs': grouped.size(),
    }).reset_index()
    summary['std_defined'] = summary['n_runs'] > 1
    summary[['train_std', 'test_std']] = summary[['train_std', 'test_std']].fillna(0.0)
    if 'status' in result.columns:
        failed = result[result['status'] != 'ok'].groupby('fraction').size()
        summary['n_failed'] = summary['fraction'].map(failed).fillna(0).astype(int)
    return summary


def count_adjacent_inversions(means: Sequence[float]) -> int:
    """Number of steps where the sequence goes up instead of down"""
    values = np.asarray(means, dtype=np.float64)
    return int(np.sum(np.diff(values) > 0))


def sweep_shape(summary: pd.DataFrame) -> Dict[str, float]:
    """Headline checks on a summary: overall decrease, inversions, std shrinkage"""
    ordered = summary.sort_values('fraction')
    first, last = ordered.iloc[0], ordered.iloc[-1]
    return {
        'decrease_factor': float(first['train_mean'] / last['train_mean']) if last['train_mean'] > 0 else np.inf,
        'inversions': count_adjacent_inversions(ordered['train_mean']),
        'std_shrinks': bool(last['train_std'] <= first['train_std']),
    }


def phase_spike_report(trace: pd.DataFrame, boundaries: Sequence[int], window: int = 50) -> pd.DataFrame:
    """
    Loss behaviour around every phase switch.

    For each boundary b (the last epoch of a phase) reports the loss at b,
    the peak within `window` epochs after it and the loss at the end of the
    new phase, together with end / peak.
    """
    losses = trace.set_index('epoch')['combined']
    last_epoch = int(losses.index.max())
    ends = list(boundaries[1:]) + [last_epoch]
    rows: List[Dict] = []
    for phase, (boundary, end) in enumerate(zip(boundaries, ends), start=1):
        after = losses.loc[boundary + 1:min(boundary + window, end)]
        if after.empty:
            raise InvalidArgumentError(f"No epochs recorded after boundary {boundary}")
        before = float(losses.loc[boundary])
        peak = float(after.max())
        phase_end = float(losses.loc[end])
        rows.append({'phase': phase, 'boundary': int(boundary), 'loss_before': before, 'spike_peak': peak,
                     'phase_end_loss': phase_end, 'spiked': peak > before,
                     'end_to_peak': phase_end / peak if peak > 0 else np.nan})
    return pd.DataFrame(rows, columns=['phase', 'boundary', 'loss_before', 'spike_peak', 'phase_end_loss',
                                       'spiked', 'end_to_peak'])


GAP_COLUMNS = ['seed', 'kind', 'lhs', 'rhs', 'applicable', 'satisfied']
LAMBDA_COLUMNS = ['lambda', 'train_w1', 'final_wasserstein', 'final_supervised', 'train_mse']
PERMUTATION_W1_RATIO = 3.0
PERMUTATION_MSE_RATIO = 10.0


def _with_train(cfg: ExperimentConfig, seed: Optional[int] = None, **train_update) -> ExperimentConfig:
    update: Dict = {'train': cfg.train.model_copy(update=train_update)}
    if seed is not None:
        update['seed'] = seed
    return cfg.model_copy(update=update)


def _labeled_fraction(cfg: ExperimentConfig) -> float:
    return cfg.train.labeled_fraction if cfg.train.labeled_fraction > 0 else cfg.checks.comparison_fraction


def gap_checks(cfg: ExperimentConfig) -> pd.DataFrame:
    """
    Trained minimiser against a labels-only specialist, once per seed in cfg.checks.

    Both models see the same labeled individuals. The specialist trains with
    lambda = 0 for checks.specialist_epochs (default train.epochs) so that it
    overfits the labels; the row is satisfied when the minimiser's supervised
    term stays within lambda * W1(specialist) plus the slack.
    """
    checks = cfg.checks
    rows = []
    for seed in checks.seeds:
        seeded = _with_train(cfg, seed, labeled_fraction=_labeled_fraction(cfg))
        train_data, _ = generate_experiment_data(seeded)
        smoother, net = build_smoother(seeded), build_network(seeded)
        train_cfg = build_train_config(seeded)
        params_star, _ = train(train_data.y, smoother, train_data.phi_star, net, train_cfg)
        specialist_cfg = specialist_config(train_cfg, 'labeled')
        if checks.specialist_epochs is not None:
            specialist_cfg = replace(specialist_cfg, epochs=checks.specialist_epochs)
        specialist_params, _ = train(train_data.y, smoother, train_data.phi_star, net, specialist_cfg)
        labeled = select_labeled(train_data.phi_star.values.size, train_cfg.labeled_fraction,
                                 SeededRng(train_cfg.seed).child(LABEL_STREAM))
        result = minimiser_gap_check(net, smooth(train_data.y, smoother), train_data.phi_star, params_star,
                                     specialist_params, labeled, train_cfg.lam, 'labeled', train_cfg.sinkhorn,
                                     train_cfg.w1_solver, checks.slack)
        logger.info(f"Gap check seed {seed}: {result.lhs:.6g} vs {result.rhs:.6g} "
                    f"(applicable={result.applicable}, satisfied={result.satisfied})")
        rows.append({'seed': seed, 'kind': result.kind, 'lhs': result.lhs, 'rhs': result.rhs,
                     'applicable': result.applicable, 'satisfied': result.satisfied})
    return pd.DataFrame(rows, columns=GAP_COLUMNS)


def permutation_comparison(cfg: ExperimentConfig) -> Dict[str, float]:
    """
    A lambda-only run against a run with a few labels on the same data.

    The unlabeled run permutes the scores when its final W1 is within
    PERMUTATION_W1_RATIO of the labeled run's while its MSE is at least
    PERMUTATION_MSE_RATIO times larger.
    """
    labeled = run_single_experiment(_with_train(cfg, labeled_fraction=_labeled_fraction(cfg))).metrics
    unlabeled = run_single_experiment(_with_train(cfg, labeled_fraction=0.0)).metrics
    w1_ratio = unlabeled['train_w1'] / labeled['train_w1'] if labeled['train_w1'] > 0 else np.inf
    mse_ratio = unlabeled['train_mse'] / labeled['train_mse'] if labeled['train_mse'] > 0 else np.inf
    return {
        'labeled_w1': labeled['train_w1'],
        'unlabeled_w1': unlabeled['train_w1'],
        'labeled_mse': labeled['train_mse'],
        'unlabeled_mse': unlabeled['train_mse'],
        'w1_ratio': float(w1_ratio),
        'mse_ratio': float(mse_ratio),
        'permutation': bool(w1_ratio <= PERMUTATION_W1_RATIO and mse_ratio >= PERMUTATION_MSE_RATIO),
    }


def lambda_sweep(cfg: ExperimentConfig) -> pd.DataFrame:
    """One training run per lambda in cfg.checks, in increasing order, on the same seed and data"""
    rows = []
    for lam in sorted(cfg.checks.lambdas):
        outcome = run_single_experiment(_with_train(cfg, lam=float(lam)))
        last = outcome.trace.last()
        rows.append({'lambda': float(lam), 'train_w1': outcome.metrics['train_w1'],
                     'final_wasserstein': last['wasserstein'], 'final_supervised': last['supervised'],
                     'train_mse': outcome.metrics['train_mse']})
    return pd.DataFrame(rows, columns=LAMBDA_COLUMNS)
