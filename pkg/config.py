"""
Run configuration: one JSON file for every stage, with environment
overrides loaded through python-dotenv, and the seed sub-streams every
random draw in the pipeline comes from.
"""
from dotenv import load_dotenv

load_dotenv()
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from errors import ConfigError

# Environment overrides
ENV_OUTPUT_DIR = 'MOTION_OUTPUT_DIR'
ENV_THREADS = 'MOTION_THREADS'
ENV_SEED = 'MOTION_SEED'
ENV_DATABASE_URL = 'DATABASE_URL'
ENV_RUN_CONFIG = 'RUN_CONFIG'


def substream(seed, *names):
    """Independent generator for a named stage/run, derived from the global seed"""
    key = []
    for name in names:
        if isinstance(name, (int, np.integer)):
            key.append(int(name))
        else:
            digest = hashlib.sha256(str(name).encode('utf-8')).digest()
            key.append(int.from_bytes(digest[:4], 'little'))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def substream_seed(seed, *names):
    """Integer seed drawn from a named sub-stream, for configs that carry a plain seed"""
    return int(substream(seed, *names).integers(0, 2 ** 31 - 1))


def config_hash(payload):
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class PathsConfig:
    output_dir: str = 'motion_output'
    base_volumes: tuple = ()
    frames: tuple = ()

    def validate(self):
        for path in list(self.base_volumes) + list(self.frames):
            if not os.path.exists(path):
                raise ConfigError(f"paths: input file not found: {path}")
        if self.base_volumes and len(self.base_volumes) != 10:
            raise ConfigError(f"paths.base_volumes must list 10 phase volumes, got {len(self.base_volumes)}")


@dataclass(frozen=True)
class PhantomConfig:
    """Analytic base cycle used when no base volumes are given"""
    dims: tuple = (16, 16, 16)
    blobs: tuple = ()
    breathing_amplitude: tuple = (0.0, 0.0, 1.5)
    background: float = 100.0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"phantom.dims must be three positive integers, got {self.dims}")
        if len(self.breathing_amplitude) != 3:
            raise ConfigError("phantom.breathing_amplitude must have 3 components")


@dataclass(frozen=True)
class MarkerConfig:
    points: tuple = ()

    def validate(self):
        if not self.points:
            raise ConfigError("markers.points must list at least one marker coordinate")
        for pt in self.points:
            if len(pt) != 3:
                raise ConfigError(f"markers.points entries must be 3D coordinates, got {pt}")


@dataclass(frozen=True)
class LmsConfig:
    L: int = 10
    eta: float = 0.01

    def validate(self):
        if self.L < 1:
            raise ConfigError("lms.L must be >= 1")
        if self.eta < 0:
            raise ConfigError("lms.eta must be >= 0")


@dataclass(frozen=True)
class LinearConfig:
    L: int = 10

    def validate(self):
        if self.L < 1:
            raise ConfigError("linear.L must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig
    flow: object
    rnn: object
    lms: LmsConfig
    linear: LinearConfig
    drift: object
    noise: object
    split: object
    markers: MarkerConfig
    warp: object
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    seed: int = 0
    n_runs: int = 10
    n_workers: int = 1
    flow_grid: dict = field(default_factory=dict)
    rnn_grid: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        for section in (self.paths, self.flow, self.rnn, self.lms, self.linear, self.drift,
                        self.noise, self.split, self.markers, self.warp, self.phantom):
            section.validate()
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.rnn.r != len(self.markers.points):
            raise ConfigError(f"rnn.r={self.rnn.r} does not match {len(self.markers.points)} marker points")


def _build(cls, raw, section):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"section '{section}' has unknown keys: {sorted(unknown)}")
    values = {}
    for key, value in raw.items():
        values[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value) \
            if isinstance(value, list) else value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section '{section}': {e}")


def run_config_from_dict(raw, apply_env=True):
    # Section types live with their modules
    from correspondence import WarpParams
    from optical_flow import FlowParams
    from predictors import RnnConfig
    from synthetic import DriftSpec, NoiseSpec, drift_from_preset
    from tracking import SplitSpec

    if not isinstance(raw, dict):
        raise ConfigError("run-config must be a JSON object")
    top_level = {'paths', 'flow', 'rnn', 'lms', 'linear', 'drift', 'noise', 'split', 'markers',
                 'warp', 'phantom', 'seed', 'n_runs', 'n_workers', 'flow_grid', 'rnn_grid'}
    unknown = set(raw) - top_level
    if unknown:
        raise ConfigError(f"run-config has unknown keys: {sorted(unknown)}")

    raw = json.loads(json.dumps(raw))
    if apply_env:
        if os.environ.get(ENV_OUTPUT_DIR):
            raw.setdefault('paths', {})['output_dir'] = os.environ[ENV_OUTPUT_DIR]
        if os.environ.get(ENV_THREADS):
            raw['n_workers'] = _env_int(ENV_THREADS)
        if os.environ.get(ENV_SEED):
            raw['seed'] = _env_int(ENV_SEED)

    drift_raw = dict(raw.get('drift') or {})
    if 'preset' in drift_raw:
        try:
            drift = drift_from_preset(drift_raw.pop('preset'), **drift_raw)
        except TypeError as e:
            raise ConfigError(f"section 'drift': {e}")
    else:
        drift = _build(DriftSpec, drift_raw, 'drift')

    seed = int(raw.get('seed', 0))
    rnn_raw = dict(raw.get('rnn') or {})
    markers = _build(MarkerConfig, raw.get('markers'), 'markers')
    rnn_raw.setdefault('r', len(markers.points))
    rnn_raw.setdefault('seed', seed)
    noise_raw = dict(raw.get('noise') or {})
    noise_raw.setdefault('seed', seed)

    cfg = RunConfig(
        paths=_build(PathsConfig, raw.get('paths'), 'paths'),
        flow=_build(FlowParams, raw.get('flow'), 'flow'),
        rnn=_build(RnnConfig, rnn_raw, 'rnn'),
        lms=_build(LmsConfig, raw.get('lms'), 'lms'),
        linear=_build(LinearConfig, raw.get('linear'), 'linear'),
        drift=drift,
        noise=_build(NoiseSpec, noise_raw, 'noise'),
        split=_build(SplitSpec, raw.get('split'), 'split'),
        markers=markers,
        warp=_build(WarpParams, raw.get('warp'), 'warp'),
        phantom=_build(PhantomConfig, raw.get('phantom'), 'phantom'),
        seed=seed,
        n_runs=int(raw.get('n_runs', 10)),
        n_workers=int(raw.get('n_workers', 1)),
        flow_grid=raw.get('flow_grid') or {},
        rnn_grid=raw.get('rnn_grid') or {},
    )
    try:
        cfg.validate()
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e))
    return cfg


def load_run_config(path, apply_env=True):
    if not os.path.exists(path):
        raise ConfigError(f"run-config not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"run-config {path} is not valid JSON: {e}")
    return run_config_from_dict(raw, apply_env=apply_env)


def _env_int(name):
    try:
        return int(os.environ[name])
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got {os.environ[name]!r}")


def database_url(output_dir):
    url = os.environ.get(ENV_DATABASE_URL)
    if url:
        return url
    return f"sqlite:///{os.path.abspath(os.path.join(output_dir, 'motion_runs.db'))}"
