"""
Marker trajectories: sampling displacement fields at marker positions,
train/validation/test splits, and normalisation with training statistics.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial.distance import pdist

from errors import ConfigError, DegenerateSignalError, EmptyInputError

logger = logging.getLogger(__name__)

AXES = ('x', 'y', 'z')
TRAJECTORY_COLUMNS = ['t_index', 'marker', 'ux_mm', 'uy_mm', 'uz_mm']


@dataclass(eq=False)
class TrajectorySet:
    """
    ``series[n]`` holds (ux, uy, uz) of marker 1, then marker 2, ... at time
    index n, in mm. ``points`` are the marker positions at t_1 in voxel
    coordinates.
    """
    points: np.ndarray
    series: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2 or self.series.shape[0] < 1:
            raise ValueError(f"series must be a non-empty (N, 3r) matrix, got shape {self.series.shape}")
        if self.series.shape[1] != 3 * self.r or self.r < 1:
            raise ValueError(f"series has {self.series.shape[1]} columns for {self.r} markers")
        if not np.all(np.isfinite(self.series)):
            raise ValueError("trajectory series must be finite")

    @property
    def r(self):
        return self.points.shape[0]

    @property
    def n_frames(self):
        return self.series.shape[0]

    def column_name(self, column):
        return f"marker {column // 3 + 1} axis {AXES[column % 3]}"

    def per_marker(self, rows=None):
        """View of the series as (N, r, 3)"""
        data = self.series if rows is None else self.series[rows]
        return data.reshape(data.shape[0], self.r, 3)

    def with_series(self, series):
        return TrajectorySet(self.points.copy(), series)


@dataclass(frozen=True)
class SplitSpec:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def validate(self):
        for name in ('n_train', 'n_val', 'n_test'):
            if getattr(self, name) < 1:
                raise ConfigError(f"split.{name} must be >= 1, got {getattr(self, name)}")

    def validate_for(self, n_frames):
        self.validate()
        if self.total > n_frames:
            raise ConfigError(f"split needs {self.total} frames but the series has {n_frames}")

    @property
    def total(self):
        return self.n_train + self.n_val + self.n_test

    @property
    def train(self):
        return slice(0, self.n_train)

    @property
    def val(self):
        return slice(self.n_train, self.n_train + self.n_val)

    @property
    def test(self):
        return slice(self.n_train + self.n_val, self.total)


@dataclass(frozen=True)
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray


def extract_trajectories(dvfs, points):
    """Trilinear samples of each field at each marker, converted to mm"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dvfs = list(dvfs)
    if not dvfs:
        raise EmptyInputError("no displacement fields to sample")
    dims = np.asarray(dvfs[0].dims, dtype=np.float64)
    outside = np.any((points < 0) | (points > dims - 1), axis=1)
    if np.any(outside):
        bad = points[np.argmax(outside)].tolist()
        raise ValueError(f"marker point {bad} lies outside the grid of dims {tuple(int(d) for d in dims)}")

    spacing = np.asarray(dvfs[0].spacing)
    rows = []
    for dvf in dvfs:
        samples = np.stack([
            ndimage.map_coordinates(dvf.data[..., c], points.T, order=1, mode='nearest', prefilter=False)
            for c in range(3)
        ], axis=1)
        rows.append((samples * spacing).ravel())
    return TrajectorySet(points, np.vstack(rows))


def fit_norm(ts, split):
    if split.n_train < 2:
        raise ConfigError("normalisation needs at least 2 training rows")
    train = ts.series[split.train]
    mu = train.mean(axis=0)
    sigma = train.std(axis=0)
    for column in range(train.shape[1]):
        if not sigma[column] > 0:
            raise DegenerateSignalError(
                f"zero training variance for {ts.column_name(column)}: degenerate marker axis",
                column=column)
    return NormStats(mu, sigma)


def apply_norm(stats, series):
    return (np.asarray(series) - stats.mu) / stats.sigma


def invert_norm(stats, series):
    return np.asarray(series) * stats.sigma + stats.mu


def motion_amplitude(ts):
    """Largest 3D distance between any two positions of each marker"""
    amplitudes = []
    for marker in range(ts.r):
        positions = ts.series[:, 3 * marker:3 * marker + 3]
        amplitudes.append(float(pdist(positions).max()) if len(positions) > 1 else 0.0)
    return np.array(amplitudes)


def save_trajectories(ts, path):
    records = []
    per_marker = ts.per_marker()
    for t in range(ts.n_frames):
        for p in range(ts.r):
            ux, uy, uz = per_marker[t, p]
            records.append((t, p, ux, uy, uz))
    frame = pd.DataFrame.from_records(records, columns=TRAJECTORY_COLUMNS)
    frame.to_csv(path, index=False, float_format='%.17g')
    logger.info("wrote %d trajectory rows to %s", len(frame), path)


def load_trajectories(path, points=None):
    frame = pd.read_csv(path)
    missing = set(TRAJECTORY_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: trajectory CSV missing columns {sorted(missing)}")
    frame = frame.sort_values(['t_index', 'marker'])
    n_frames = frame['t_index'].nunique()
    r = frame['marker'].nunique()
    if len(frame) != n_frames * r:
        raise ValueError(f"{path}: expected {n_frames * r} rows for {n_frames} frames x {r} markers")
    series = frame[['ux_mm', 'uy_mm', 'uz_mm']].to_numpy().reshape(n_frames, 3 * r)
    if points is None:
        points = np.zeros((r, 3))
    return TrajectorySet(points, series)
