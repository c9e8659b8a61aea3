"""
Command-line entry point.

    python run_experiments.py gen|train|iv|sweep|track|checks|eval|schema [options]

Configuration precedence: preset < --config file < command-line overrides.
Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
failure, 4 I/O failure. Failures print one JSON object on stderr.
"""
import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from data_generation import generate_dataset
from data_loader import (load_checkpoint, read_json, save_checkpoint,
                         save_dataset, write_field_csv, write_frame_csv,
                         write_json, write_trace_csv)
from eval_functions import (AGGREGATE_COLUMNS, count_adjacent_inversions,
                            evaluate_estimate, gap_checks, iv_diagnostics,
                            iv_table, lambda_sweep, permutation_comparison,
                            phase_spike_report, run_iv_experiment,
                            run_single_experiment, score_metrics, summarize,
                            sweep, sweep_shape)
from experiment_config import (FORMAT_VERSION, TRAIN_NOISE_STREAM,
                               ExperimentConfig, build_grids, build_network,
                               build_noise, build_schedule, build_smoother,
                               build_train_config, config_hash, config_schema,
                               generate_experiment_data, load_config)
from numerics_core import EndofairError, NumericalFailure, SeededRng
from smoothing import smooth
from trainer import predict_field, train_time_varying

logger = logging.getLogger(__name__)

EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

COMMANDS = ('gen', 'train', 'iv', 'sweep', 'track', 'checks', 'eval', 'schema')


def setup_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else os.environ.get('ENDOFAIR_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s', force=True)


def git_describe() -> Optional[str]:
    try:
        result = subprocess.run(['git', 'describe', '--always', '--dirty'], capture_output=True, text=True,
                                cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


def write_manifest(cfg: ExperimentConfig, command: str, started: float, metrics: Dict, artifacts: List[str],
                   filename: str = 'manifest.json'):
    manifest = {
        'format_version': FORMAT_VERSION,
        'command': command,
        'config': cfg.to_json_dict(),
        'config_hash': config_hash(cfg),
        'seed': cfg.seed,
        'wall_time_seconds': round(time.time() - started, 3),
        'git_describe': git_describe(),
        'metrics': metrics,
        'artifacts': sorted(artifacts),
    }
    path = Path(cfg.output_dir) / filename
    write_json(manifest, path)
    logger.info(f"Wrote manifest to {path}")
    return manifest


def cmd_gen(cfg: ExperimentConfig) -> Dict:
    out = Path(cfg.output_dir)
    train_data, test_data = generate_experiment_data(cfg)
    save_dataset(train_data, out / 'train')
    save_dataset(test_data, out / 'test')
    metrics = {'train_samples': train_data.y.grid.size, 'test_samples': test_data.y.grid.size}
    return {'metrics': metrics, 'artifacts': ['train', 'test']}


def cmd_train(cfg: ExperimentConfig) -> Dict:
    out = Path(cfg.output_dir)
    outcome = run_single_experiment(cfg)
    write_trace_csv(outcome.trace, out / 'trace.csv')
    save_checkpoint(build_network(cfg), outcome.params, out / 'checkpoint')
    write_field_csv(outcome.train_estimate, out / 'estimate_train.csv')
    write_field_csv(outcome.test_estimate, out / 'estimate_test.csv')
    write_frame_csv(pd.DataFrame([outcome.metrics]), out / 'metrics.csv')
    return {'metrics': outcome.metrics,
            'artifacts': ['trace.csv', 'checkpoint.json', 'checkpoint.bin', 'estimate_train.csv',
                          'estimate_test.csv', 'metrics.csv']}


def cmd_iv(cfg: ExperimentConfig) -> Dict:
    out = Path(cfg.output_dir)
    runs = run_iv_experiment(cfg)
    artifacts = ['iv_results.csv', 'iv_diagnostics.json']
    for run in runs:
        write_field_csv(run.estimate, out / f'iv_estimate_k{run.k}.csv')
        artifacts.append(f'iv_estimate_k{run.k}.csv')
    write_frame_csv(iv_table(runs), out / 'iv_results.csv')
    write_json(iv_diagnostics(runs), out / 'iv_diagnostics.json')
    metrics = {f'error_norm_k{run.k}': run.metrics['error_norm'] for run in runs}
    metrics.update({f'chosen_N_k{run.k}': run.result.chosen_N for run in runs})
    return {'metrics': metrics, 'artifacts': artifacts}


def cmd_sweep(cfg: ExperimentConfig) -> Dict:
    out = Path(cfg.output_dir)
    result = sweep(None, cfg.sweep.fractions_percent, cfg.sweep.realizations, cfg)
    write_frame_csv(result, out / 'sweep_runs.csv')
    summary = summarize(result)
    write_frame_csv(summary[AGGREGATE_COLUMNS], out / 'sweep_summary.csv')
    metrics = sweep_shape(summary)
    metrics['failed_runs'] = int((result['status'] != 'ok').sum())
    return {'metrics': metrics, 'artifacts': ['sweep_runs.csv', 'sweep_summary.csv']}


def cmd_track(cfg: ExperimentConfig) -> Dict:
    out = Path(cfg.output_dir)
    schedule = build_schedule(cfg)
    train_grid, _ = build_grids(cfg)
    noise = build_noise(cfg)
    noise_rng = SeededRng(cfg.seed).child(TRAIN_NOISE_STREAM)
    datasets = [generate_dataset(scenario, noise, train_grid, noise_rng.child(phase))
                for phase, (scenario, _) in enumerate(schedule.phases)]
    smoother = build_smoother(cfg)
    net = build_network(cfg)
    params, trace = train_time_varying([ds.y for ds in datasets], schedule, smoother, net, build_train_config(cfg))
    frame = trace.to_frame()
    write_trace_csv(trace, out / 'trace.csv')
    report = phase_spike_report(frame, trace.boundaries)
    write_frame_csv(report, out / 'phase_report.csv')
    save_checkpoint(net, params, out / 'checkpoint')
    final = predict_field(net, params, smooth(datasets[-1].y, smoother))
    metrics = {f'final_phase_{key}': value for key, value in evaluate_estimate(final, datasets[-1].phi_star).items()}
    metrics['boundaries'] = list(trace.boundaries)
    metrics['all_phases_spiked'] = bool(report['spiked'].all())
    metrics['max_end_to_peak'] = float(report['end_to_peak'].max())
    return {'metrics': metrics, 'artifacts': ['trace.csv', 'phase_report.csv', 'checkpoint.json', 'checkpoint.bin']}


def cmd_checks(cfg: ExperimentConfig) -> Dict:
    out = Path(cfg.output_dir)
    gaps = gap_checks(cfg)
    write_frame_csv(gaps, out / 'gap_checks.csv')
    permutation = permutation_comparison(cfg)
    write_json(permutation, out / 'permutation.json')
    lambdas = lambda_sweep(cfg)
    write_frame_csv(lambdas, out / 'lambda_sweep.csv')
    metrics = {
        'gap_seeds': len(gaps),
        'gap_applicable': int(gaps['applicable'].sum()),
        'gap_satisfied': int(gaps['satisfied'].sum()),
        'permutation_w1_ratio': permutation['w1_ratio'],
        'permutation_mse_ratio': permutation['mse_ratio'],
        'permutation_observed': permutation['permutation'],
        # W1 of the estimate should not grow as lambda grows
        'lambda_w1_inversions': count_adjacent_inversions(lambdas['train_w1']),
    }
    return {'metrics': metrics, 'artifacts': ['gap_checks.csv', 'permutation.json', 'lambda_sweep.csv']}


def cmd_eval(cfg: ExperimentConfig, run_dir: Path) -> Dict:
    """Recompute the metrics of a finished `train` run from its checkpoint"""
    net, params = load_checkpoint(run_dir / 'checkpoint')
    train_data, test_data = generate_experiment_data(cfg)
    smoother = build_smoother(cfg)
    metrics = {}
    for prefix, data in (('train', train_data), ('test', test_data)):
        smoothed = smooth(data.y, smoother)
        estimate = predict_field(net, params, smoothed)
        metrics.update({f'{prefix}_{key}': value
                        for key, value in score_metrics(estimate, smoothed, data.phi_star).items()})
    write_frame_csv(pd.DataFrame([metrics]), Path(cfg.output_dir) / 'eval_metrics.csv')
    return {'metrics': metrics, 'artifacts': ['eval_metrics.csv']}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Debias scores corrupted by endogenous noise")
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument('--verbose', action='store_true', help="DEBUG logging")
        if name == 'schema':
            cmd.add_argument('--out', help="File to write the JSON schema to (default: stdout)")
            continue
        cmd.add_argument('--config', help="JSON config, or the manifest.json of an earlier run")
        cmd.add_argument('--preset', choices=['desk', 'paper'], help="Built-in starting config (default: desk)")
        cmd.add_argument('--dimension', type=int, choices=[1, 2], help="Preset dimension")
        cmd.add_argument('--scenario', choices=['quadratic1d', 'pnorm2d', 'sincos2d'])
        cmd.add_argument('--seed', type=int)
        cmd.add_argument('--out', help="Output directory")
        cmd.add_argument('--epochs', type=int, help="Training epochs (epochs per phase for `track`)")
        cmd.add_argument('--lambda', dest='lam', type=float, help="Weight of the Wasserstein term")
        cmd.add_argument('--labeled-fraction', type=float, help="Fraction of labeled samples in [0, 1]")
        if name == 'eval':
            cmd.add_argument('--run', required=True, help="Directory of a finished `train` run")
        if name == 'iv':
            cmd.add_argument('--k', dest='k_values', type=int, nargs='+', help="Instrument counts to compare")
            cmd.add_argument('--bandwidths', type=float, nargs='+',
                             help="Bandwidth grid as multiples of the predictor spread")
            cmd.add_argument('--max-n', dest='max_n', type=int, help="Largest Landweber iteration count")
            cmd.add_argument('--c', dest='step', type=float, help="Landweber step in (0, 1)")
            cmd.add_argument('--coupling', choices=['latent', 'independent'], help="How instruments relate to x")
        if name == 'checks':
            cmd.add_argument('--seeds', type=int, nargs='+', help="Seeds of the minimiser gap check")
            cmd.add_argument('--specialist-epochs', type=int, help="Epochs of the labels-only specialist")
            cmd.add_argument('--lambdas', type=float, nargs='+', help="Lambda values of the monotonicity run")
    return parser


def _file_config(path: str) -> Dict:
    data = read_json(path)
    # a run manifest carries the full config it was produced with
    if 'config' in data and 'format_version' in data:
        return data['config']
    return data


def resolve_config(args: argparse.Namespace, file_data: Optional[Dict] = None) -> ExperimentConfig:
    if file_data is None and args.config:
        file_data = _file_config(args.config)
    preset = args.preset or (None if file_data else 'desk')
    default_dimension = 2 if args.command in ('track', 'checks') else 1
    dimension = args.dimension or (file_data or {}).get('dimension') or default_dimension
    overrides: Dict = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.out:
        overrides['output_dir'] = args.out
    if args.scenario:
        overrides['scenario'] = {'kind': args.scenario}
    if args.epochs is not None:
        if args.command == 'track':
            overrides['track'] = {'epochs_per_phase': args.epochs}
        else:
            overrides.setdefault('train', {})['epochs'] = args.epochs
    if args.lam is not None:
        overrides.setdefault('train', {})['lambda'] = args.lam
    if args.labeled_fraction is not None:
        overrides.setdefault('train', {})['labeled_fraction'] = args.labeled_fraction
    iv_flags = {'k_values': getattr(args, 'k_values', None), 'bandwidth_multipliers': getattr(args, 'bandwidths', None),
                'max_N': getattr(args, 'max_n', None), 'c': getattr(args, 'step', None),
                'coupling': getattr(args, 'coupling', None)}
    iv_overrides = {key: value for key, value in iv_flags.items() if value is not None}
    if iv_overrides:
        overrides['iv'] = iv_overrides
    checks_flags = {'seeds': getattr(args, 'seeds', None), 'lambdas': getattr(args, 'lambdas', None),
                    'specialist_epochs': getattr(args, 'specialist_epochs', None)}
    checks_overrides = {key: value for key, value in checks_flags.items() if value is not None}
    if checks_overrides:
        overrides['checks'] = checks_overrides
    return load_config(preset, dimension, file_data, overrides)


def run(args: argparse.Namespace) -> Dict:
    if args.command == 'schema':
        schema = config_schema()
        if args.out:
            write_json(schema, args.out)
        else:
            print(json.dumps(schema, indent=2, sort_keys=True))
        return {}

    started = time.time()
    filename = 'manifest.json'
    if args.command == 'eval':
        run_dir = Path(args.run)
        source = read_json(run_dir / 'manifest.json')
        file_data = source['config']
        if not args.out:
            file_data = dict(file_data, output_dir=str(run_dir))
            # the training manifest stays in place
            filename = 'eval_manifest.json'
        cfg = resolve_config(args, file_data)
        outcome = cmd_eval(cfg, run_dir)
    else:
        cfg = resolve_config(args)
        logger.info(f"Running '{args.command}' with config {cfg.name} (hash {config_hash(cfg)[:12]}, seed {cfg.seed})")
        handler = {'gen': cmd_gen, 'train': cmd_train, 'iv': cmd_iv, 'sweep': cmd_sweep, 'track': cmd_track,
                   'checks': cmd_checks}
        outcome = handler[args.command](cfg)
    return write_manifest(cfg, args.command, started, outcome['metrics'], outcome['artifacts'], filename)


def error_payload(exc: BaseException, code: int) -> str:
    return json.dumps({'error': type(exc).__name__, 'message': str(exc), 'exit_code': code})


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericalFailure):
        return EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_INVALID


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        manifest = run(args)
    except (ValidationError, ValueError, EndofairError, OSError) as exc:
        code = exit_code_for(exc)
        logger.error(f"'{args.command}' failed: {exc}")
        print(error_payload(exc, code), file=sys.stderr)
        return code
    if manifest.get('metrics'):
        logger.info(f"Metrics: {json.dumps(manifest['metrics'], default=float)}")
    return 0


if __name__ == '__main__':
    sys.exit(main())
