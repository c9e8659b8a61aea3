import json

import pandas as pd
import pytest

import run_experiments
from data_loader import read_json, write_json
from numerics_core import NumericalFailure
from run_experiments import build_parser, main, resolve_config

TINY_1D = {'name': 'tiny-1d', 'dimension': 1, 'grid': {'count': 16}, 'network': {'hidden': 8},
           'smoother': {'kind': 'moving_average', 'taps': 3},
           'train': {'epochs': 3, 'learning_rate': 1e-3, 'w1_solver': 'sorted', 'log_every': 0},
           'iv': {'k_values': [2, 3], 'bandwidth_multipliers': [0.3, 0.6], 'max_N': 5},
           'sweep': {'fractions_percent': [0.0, 50.0], 'realizations': 2}}

TINY_2D = {'name': 'tiny-2d', 'dimension': 2, 'grid': {'count': 6}, 'network': {'kernel': 3},
           'scenario': {'kind': 'sincos2d'}, 'smoother': {'kind': 'gaussian_blur', 'stddev': 1.0},
           'train': {'labeled_fraction': 0.1, 'learning_rate': 1e-3, 'w1_solver': 'sorted', 'log_every': 0},
           'track': {'schedule': 'amplitude', 'epochs_per_phase': 3}}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / 'tiny.json'
    write_json(TINY_1D, path)
    return str(path)


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_is_byte_identical_for_one_seed(tmp_path):
    for name in ('a', 'b'):
        assert main(['gen', '--preset', 'desk', '--seed', '3', '--out', str(tmp_path / name)]) == 0
    for part in ('train', 'test'):
        for name in ('phi_star.csv', 'y.csv'):
            assert (tmp_path / 'a' / part / name).read_bytes() == (tmp_path / 'b' / part / name).read_bytes()
    manifest = read_json(tmp_path / 'a' / 'manifest.json')
    assert manifest['seed'] == 3
    assert manifest['metrics'] == {'train_samples': 200, 'test_samples': 200}


def test_train_writes_trace_checkpoint_and_manifest(tmp_path):
    out = tmp_path / 'run'
    assert main(['train', '--preset', 'desk', '--epochs', '4', '--out', str(out)]) == 0
    trace = pd.read_csv(out / 'trace.csv')
    assert len(trace) == 4
    for name in ('checkpoint.json', 'checkpoint.bin', 'estimate_train.csv', 'estimate_test.csv', 'metrics.csv'):
        assert (out / name).exists()
    manifest = read_json(out / 'manifest.json')
    assert manifest['command'] == 'train'
    assert manifest['config']['train']['epochs'] == 4
    assert len(manifest['config_hash']) == 64
    assert set(manifest['metrics']) >= {'train_mse', 'test_mse', 'train_w1'}


def test_eval_recomputes_the_training_metrics(tmp_path, tiny_config):
    run_dir = tmp_path / 'run'
    assert main(['train', '--config', tiny_config, '--out', str(run_dir)]) == 0
    trained = read_json(run_dir / 'manifest.json')['metrics']
    assert main(['eval', '--run', str(run_dir)]) == 0
    evaluated = pd.read_csv(run_dir / 'eval_metrics.csv').iloc[0]
    for key in ('train_mse', 'test_mse', 'train_error_norm', 'test_w1'):
        assert evaluated[key] == pytest.approx(trained[key], rel=1e-12)
    assert read_json(run_dir / 'manifest.json')['command'] == 'train'
    assert read_json(run_dir / 'eval_manifest.json')['command'] == 'eval'


def test_rerun_from_a_manifest_reproduces_the_metrics(tmp_path, tiny_config):
    assert main(['train', '--config', tiny_config, '--seed', '4', '--out', str(tmp_path / 'first')]) == 0
    manifest = str(tmp_path / 'first' / 'manifest.json')
    assert main(['train', '--config', manifest, '--out', str(tmp_path / 'second')]) == 0
    assert (tmp_path / 'first' / 'metrics.csv').read_bytes() == (tmp_path / 'second' / 'metrics.csv').read_bytes()
    assert (tmp_path / 'first' / 'trace.csv').read_bytes() == (tmp_path / 'second' / 'trace.csv').read_bytes()


def test_command_line_overrides_beat_the_config_file(tmp_path):
    path = tmp_path / 'c.json'
    write_json(dict(TINY_1D, seed=5), path)
    args = build_parser().parse_args(['train', '--config', str(path), '--seed', '9', '--lambda', '0.5',
                                      '--labeled-fraction', '0.25'])
    cfg = resolve_config(args)
    assert cfg.seed == 9
    assert cfg.train.lam == 0.5
    assert cfg.train.labeled_fraction == 0.25
    assert cfg.train.epochs == 3
    assert cfg.grid.count == 16


def test_file_values_beat_the_preset(tmp_path):
    path = tmp_path / 'c.json'
    write_json({'train': {'epochs': 11}}, path)
    cfg = resolve_config(build_parser().parse_args(['train', '--preset', 'desk', '--config', str(path)]))
    assert cfg.train.epochs == 11
    assert cfg.grid.count == 200


def test_invalid_config_exits_with_2(tmp_path, capsys):
    path = tmp_path / 'bad.json'
    write_json({'train': {'labeled_fraction': 2.0}}, path)
    assert main(['train', '--config', str(path)]) == 2
    assert _error(capsys)['exit_code'] == 2


def test_missing_config_exits_with_4(tmp_path, capsys):
    assert main(['gen', '--config', str(tmp_path / 'missing.json')]) == 4
    error = _error(capsys)
    assert error['error'] == 'FileNotFoundError'


def test_numerical_failure_exits_with_3(tmp_path, monkeypatch, capsys):
    def diverge(cfg, scenario=None):
        raise NumericalFailure("loss became non-finite")

    monkeypatch.setattr(run_experiments, 'run_single_experiment', diverge)
    assert main(['train', '--preset', 'desk', '--out', str(tmp_path / 'run')]) == 3
    assert _error(capsys) == {'error': 'NumericalFailure', 'message': 'loss became non-finite', 'exit_code': 3}


def test_iv_writes_one_row_per_instrument_count(tmp_path, tiny_config):
    out = tmp_path / 'iv'
    assert main(['iv', '--config', tiny_config, '--out', str(out)]) == 0
    table = pd.read_csv(out / 'iv_results.csv')
    assert table['k'].tolist() == [2, 3]
    assert (table['chosen_N'] >= 1).all()
    assert (out / 'iv_estimate_k2.csv').exists()


def test_iv_flags_and_diagnostics(tmp_path, tiny_config):
    out = tmp_path / 'iv'
    argv = ['iv', '--config', tiny_config, '--out', str(out), '--k', '2', '4', '--bandwidths', '0.4', '0.8',
            '--max-n', '3', '--c', '0.4', '--coupling', 'independent']
    assert main(argv) == 0
    manifest = read_json(out / 'manifest.json')
    assert manifest['config']['iv'] == {**manifest['config']['iv'], 'k_values': [2, 4],
                                        'bandwidth_multipliers': [0.4, 0.8], 'max_N': 3, 'c': 0.4,
                                        'coupling': 'independent'}
    diagnostics = read_json(out / 'iv_diagnostics.json')
    assert [run['k'] for run in diagnostics['runs']] == [2, 4]
    for run in diagnostics['runs']:
        assert 1 <= run['chosen_N'] <= 3
        # one residual for the starting point and one per iteration
        assert len(run['residual_norms']) == run['chosen_N'] + 1
        assert run['bandwidth_T'] > 0
    assert 'iv_diagnostics.json' in manifest['artifacts']


def test_checks_record_their_results_in_the_manifest(tmp_path, tiny_config):
    out = tmp_path / 'checks'
    argv = ['checks', '--config', tiny_config, '--out', str(out), '--labeled-fraction', '0.25', '--seeds', '0', '1',
            '--specialist-epochs', '2', '--lambdas', '0.5', '2']
    assert main(argv) == 0
    manifest = read_json(out / 'manifest.json')
    assert manifest['config']['checks']['seeds'] == [0, 1]
    assert manifest['config']['checks']['lambdas'] == [0.5, 2.0]
    metrics = manifest['metrics']
    assert metrics['gap_seeds'] == 2
    assert 0 <= metrics['gap_satisfied'] <= metrics['gap_applicable'] <= 2
    assert set(metrics) >= {'permutation_w1_ratio', 'permutation_mse_ratio', 'permutation_observed',
                            'lambda_w1_inversions'}
    assert len(pd.read_csv(out / 'gap_checks.csv')) == 2
    assert pd.read_csv(out / 'lambda_sweep.csv')['lambda'].tolist() == [0.5, 2.0]
    assert read_json(out / 'permutation.json')['w1_ratio'] == metrics['permutation_w1_ratio']


def test_sweep_writes_runs_and_aggregates(tmp_path, tiny_config, monkeypatch):
    monkeypatch.delenv('ENDOFAIR_THREADS', raising=False)
    out = tmp_path / 'sweep'
    assert main(['sweep', '--config', tiny_config, '--out', str(out)]) == 0
    runs = pd.read_csv(out / 'sweep_runs.csv')
    assert len(runs) == 4
    summary = pd.read_csv(out / 'sweep_summary.csv')
    assert list(summary.columns) == ['fraction', 'train_mean', 'train_std', 'test_mean', 'test_std']
    assert len(summary) == 2


def test_track_reports_every_phase_switch(tmp_path):
    path = tmp_path / 'track.json'
    write_json(TINY_2D, path)
    out = tmp_path / 'track'
    assert main(['track', '--config', str(path), '--out', str(out)]) == 0
    trace = pd.read_csv(out / 'trace.csv')
    assert len(trace) == 12
    assert trace['phase'].tolist() == [0] * 3 + [1] * 3 + [2] * 3 + [3] * 3
    report = pd.read_csv(out / 'phase_report.csv')
    assert report['boundary'].tolist() == [3, 6, 9]
    assert read_json(out / 'manifest.json')['metrics']['boundaries'] == [3, 6, 9]


def test_schema_command(tmp_path):
    assert main(['schema', '--out', str(tmp_path / 'schema.json')]) == 0
    assert 'properties' in read_json(tmp_path / 'schema.json')
