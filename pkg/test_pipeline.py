#!/usr/bin/env python3
import json
import os
import sys

import pytest
from click.testing import CliRunner

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app import cli
from config import run_config_from_dict
from create_test_data import demo_config
from errors import EXIT_CONFIG, StageError
from pipeline import STAGES, run_pipeline
from results_db import run_summary
from synthetic import make_breathing_cycle
from verify_data import verify_manifest
from volume import save_volume


def tiny_config(tmp_path, **changes):
    paths = []
    for phase, volume in enumerate(make_breathing_cycle((12, 12, 12), amplitude=(0.4, 0.3, 1.2)), start=1):
        path = str(tmp_path / 'base' / f"phase_{phase:02d}.json")
        save_volume(volume, path, dtype='f32')
        paths.append(path)
    raw = demo_config(paths, str(tmp_path / 'output'), n_frames=40)
    raw.update({
        'split': {'n_train': 24, 'n_val': 8, 'n_test': 8},
        'markers': {'points': [[6, 6, 6], [4, 7, 5]]},
        'rnn': {'L': 3, 'q': 6, 'eta': 0.02, 'theta': 1.0, 'sigma_init': 0.02},
        'warp': {'sigma_w': 0.5, 'h': 2},
        'n_runs': 2,
    })
    raw.update(changes)
    return raw


@pytest.fixture(scope='module')
def finished_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp('pipeline')
    cfg = run_config_from_dict(tiny_config(tmp_path), apply_env=False)
    result = run_pipeline(cfg)
    return cfg, result


def test_every_stage_writes_artifacts(finished_run):
    cfg, result = finished_run
    assert result.exit_code == 0
    assert [stage['name'] for stage in result.manifest['stages']] == list(STAGES)
    assert all(stage['artifacts'] for stage in result.manifest['stages'])
    output = cfg.paths.output_dir
    for name in ('trajectories.csv', 'predictions.csv', 'metrics.csv', 'report.json',
                 'correspondence/model.json', 'frames/frame_0040.json', 'predicted/frame_0040.json'):
        assert os.path.exists(os.path.join(output, name)), name


def test_manifest_hashes_and_report(finished_run):
    cfg, result = finished_run
    _, checked, problems = verify_manifest(cfg.paths.output_dir)
    assert checked > 0 and problems == []
    with open(os.path.join(cfg.paths.output_dir, 'report.json')) as fh:
        report = json.load(fh)
    assert -1.0 <= report['image_prediction']['predicted'] <= 1.0
    assert [row['predictor'] for row in report['comparison']] == ['rnn', 'linear', 'lms', 'no_prediction']


def test_ledger_records_the_run(finished_run):
    cfg, result = finished_run
    from config import database_url
    runs = run_summary(database_url(cfg.paths.output_dir))
    assert runs[0]['status'] == 'ok'
    assert runs[0]['manifest_path'] == result.manifest_path


def test_rerun_gives_identical_manifest(finished_run):
    cfg, result = finished_run
    again = run_pipeline(cfg, record=False)
    assert again.manifest == result.manifest


def test_failing_stage_is_named(tmp_path):
    # markers outside the 12^3 grid fail in tracking
    raw = tiny_config(tmp_path, markers={'points': [[30, 6, 6], [4, 7, 5]]})
    cfg = run_config_from_dict(raw, apply_env=False)
    with pytest.raises(StageError) as excinfo:
        run_pipeline(cfg)
    assert excinfo.value.stage == 'track'
    assert excinfo.value.exit_code == EXIT_CONFIG


def test_cli_missing_base_volume_exits_with_config_status(tmp_path):
    raw = tiny_config(tmp_path)
    raw['paths']['base_volumes'][0] = str(tmp_path / 'missing.json')
    config_path = tmp_path / 'run.json'
    config_path.write_text(json.dumps(raw))
    result = CliRunner().invoke(cli, ['pipeline', '-c', str(config_path)])
    assert result.exit_code == EXIT_CONFIG
    assert 'not found' in result.output


def test_cli_stage_commands(tmp_path):
    raw = tiny_config(tmp_path, drift={'preset': 'seq1', 'n_frames': 12})
    config_path = tmp_path / 'run.json'
    config_path.write_text(json.dumps(raw))
    out = str(tmp_path / 'cli')
    runner = CliRunner()

    result = runner.invoke(cli, ['synth', '-c', str(config_path), '-o', out])
    assert result.exit_code == 0, result.output
    frames = os.path.join(out, 'frames', 'frame_*.json')
    result = runner.invoke(cli, ['register', '-c', str(config_path), '-o', out, frames])
    assert result.exit_code == 0, result.output
    trajectories = os.path.join(out, 'trajectories.csv')
    result = runner.invoke(cli, ['track', '-c', str(config_path), '-o', trajectories,
                                 os.path.join(out, 'dvfs', 'dvf_*.json')])
    assert result.exit_code == 0, result.output

    predictions = os.path.join(out, 'predictions.csv')
    raw['split'] = {'n_train': 6, 'n_val': 3, 'n_test': 3}
    config_path.write_text(json.dumps(raw))
    result = runner.invoke(cli, ['predict', '-c', str(config_path), '--method', 'none', '-o', predictions,
                                 trajectories])
    assert result.exit_code == 0, result.output
    result = runner.invoke(cli, ['evaluate', predictions, '--start', '9'])
    assert result.exit_code == 0, result.output
    assert '"e_rms"' in result.output

    raw['rnn_grid'] = {'theta': [1.0], 'eta': [0.02], 'sigma_init': [0.02], 'L': [2, 3], 'q': [4]}
    config_path.write_text(json.dumps(raw))
    grid_path = os.path.join(out, 'grid_rnn.csv')
    result = runner.invoke(cli, ['gridsearch-rnn', '-c', str(config_path), '-o', grid_path, trajectories])
    assert result.exit_code == 0, result.output
    for suffix in ('.csv', '_marginals.csv', '_influence.csv'):
        assert os.path.exists(os.path.join(out, 'grid_rnn' + suffix)), suffix


@pytest.mark.slow
def test_demo_run_predicts_images_closely(tmp_path):
    paths = []
    for phase, volume in enumerate(make_breathing_cycle((16, 16, 16), amplitude=(0.4, 0.3, 1.5)), start=1):
        path = str(tmp_path / 'base' / f"phase_{phase:02d}.json")
        save_volume(volume, path, dtype='f32')
        paths.append(path)
    cfg = run_config_from_dict(demo_config(paths, str(tmp_path / 'output'), n_frames=60), apply_env=False)
    assert cfg.rnn.q == 10
    result = run_pipeline(cfg, record=False)
    with open(os.path.join(cfg.paths.output_dir, 'report.json')) as fh:
        report = json.load(fh)
    assert result.exit_code == 0
    assert report['image_prediction']['predicted'] >= 0.9
