#!/usr/bin/env python3
import json
import os
import sys

import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import (ENV_OUTPUT_DIR, ENV_SEED, config_hash, database_url, load_run_config, run_config_from_dict,
                    substream, substream_seed)
from errors import ConfigError


def minimal(**extra):
    raw = {'markers': {'points': [[4, 4, 4], [2, 3, 5]]}, 'seed': 3}
    raw.update(extra)
    return raw


def test_defaults_follow_markers_and_seed():
    cfg = run_config_from_dict(minimal(), apply_env=False)
    assert cfg.rnn.r == 2
    assert cfg.rnn.seed == 3 and cfg.noise.seed == 3
    assert cfg.flow.n_layers == 3
    assert cfg.split.n_train == 2000


def test_drift_preset():
    cfg = run_config_from_dict(minimal(drift={'preset': 'seq3', 'n_frames': 50}), apply_env=False)
    assert (cfg.drift.period_T, cfg.drift.amplitude_A, cfg.drift.n_frames) == (800.0, 4.0, 50)
    with pytest.raises(ConfigError, match='drift'):
        run_config_from_dict(minimal(drift={'preset': 'seq3', 'speed': 2}), apply_env=False)
    with pytest.raises(ConfigError, match='drift'):
        run_config_from_dict(minimal(drift={'preset': 'seq3', 'period_T': 100.0}), apply_env=False)


def test_unknown_keys_and_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        run_config_from_dict(minimal(colour='red'), apply_env=False)
    with pytest.raises(ConfigError):
        run_config_from_dict(minimal(rnn={'depth': 2}), apply_env=False)
    with pytest.raises(ConfigError):
        run_config_from_dict(minimal(flow={'n_layers': 0}), apply_env=False)
    with pytest.raises(ConfigError):
        run_config_from_dict(minimal(rnn={'r': 3}), apply_env=False)
    with pytest.raises(ConfigError):
        run_config_from_dict({'markers': {'points': []}}, apply_env=False)


def test_missing_input_file_is_rejected(tmp_path):
    raw = minimal(paths={'frames': [str(tmp_path / 'nope.json')]})
    with pytest.raises(ConfigError):
        run_config_from_dict(raw, apply_env=False)


def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / 'missing.json'))
    bad = tmp_path / 'bad.json'
    bad.write_text('{"seed": ')
    with pytest.raises(ConfigError):
        load_run_config(str(bad))


def test_environment_overrides(tmp_path, monkeypatch):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(minimal()))
    monkeypatch.setenv(ENV_OUTPUT_DIR, str(tmp_path / 'out'))
    monkeypatch.setenv(ENV_SEED, '11')
    cfg = load_run_config(str(path))
    assert cfg.paths.output_dir == str(tmp_path / 'out')
    assert cfg.seed == 11 and cfg.rnn.seed == 11

    monkeypatch.setenv(ENV_SEED, 'eleven')
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_substreams_are_independent_and_reproducible():
    a = substream(5, 'noise', 1).normal(size=4)
    assert (a == substream(5, 'noise', 1).normal(size=4)).all()
    assert not (a == substream(5, 'noise', 2).normal(size=4)).all()
    assert not (a == substream(6, 'noise', 1).normal(size=4)).all()
    assert substream_seed(5, 'rnn-run', 0) == substream_seed(5, 'rnn-run', 0)


def test_config_hash_and_database_url(tmp_path, monkeypatch):
    assert config_hash({'a': 1, 'b': [1, 2]}) == config_hash({'b': [1, 2], 'a': 1})
    monkeypatch.delenv('DATABASE_URL', raising=False)
    assert database_url(str(tmp_path)).endswith('motion_runs.db')
    monkeypatch.setenv('DATABASE_URL', 'sqlite://')
    assert database_url(str(tmp_path)) == 'sqlite://'
