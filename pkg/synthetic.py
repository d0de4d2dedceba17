"""
Synthetic data: the extended breathing sequence built from a 10-phase base
cycle (sinusoidal z-drift plus Poisson noise), analytic Gaussian-blob
phantoms, and synthetic marker trajectories for the predictors.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from config import substream
from errors import ConfigError
from tracking import TrajectorySet
from volume import Volume3, voxel_grid

logger = logging.getLogger(__name__)

N_PHASES = 10

# (period_T s, amplitude_A mm) of the drift added to each of the four reference sequences
DRIFT_PRESETS = {
    'seq1': (400.0, 2.0),
    'seq2': (320.0, 1.5),
    'seq3': (800.0, 4.0),
    'seq4': (480.0, 2.5),
}


@dataclass(frozen=True)
class DriftSpec:
    amplitude_A: float = 0.0
    period_T: float = 400.0
    sample_dt: float = 0.4
    n_frames: int = 2400

    def validate(self):
        if self.amplitude_A < 0:
            raise ConfigError(f"drift.amplitude_A must be >= 0, got {self.amplitude_A}")
        if not self.period_T > 0:
            raise ConfigError(f"drift.period_T must be > 0, got {self.period_T}")
        if not self.sample_dt > 0:
            raise ConfigError(f"drift.sample_dt must be > 0, got {self.sample_dt}")
        if self.n_frames < 1:
            raise ConfigError(f"drift.n_frames must be >= 1, got {self.n_frames}")

    def time(self, k):
        """Acquisition time of 1-based frame k"""
        return (k - 1) * self.sample_dt

    def offset_mm(self, k):
        return self.amplitude_A * math.sin(2 * math.pi * self.time(k) / self.period_T)


def drift_from_preset(name, **overrides):
    if name not in DRIFT_PRESETS:
        raise ConfigError(f"unknown drift preset '{name}', choose from {sorted(DRIFT_PRESETS)}")
    period, amplitude = DRIFT_PRESETS[name]
    spec = DriftSpec(amplitude_A=amplitude, period_T=period, **overrides)
    spec.validate()
    return spec


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Poisson noise; ``lam=None`` disables it"""
    lam: float = 1000.0
    seed: int = 0
    clip_min: float = 0.0
    clip_max: float = 65535.0

    def validate(self):
        if self.lam is not None and not self.lam > 0:
            raise ConfigError(f"noise.lam must be > 0, got {self.lam}")
        if self.clip_min > self.clip_max:
            raise ConfigError("noise.clip_min must not exceed noise.clip_max")

    @property
    def enabled(self):
        return self.lam is not None


def _check_base(base):
    if len(base) != N_PHASES:
        raise ConfigError(f"the base cycle needs exactly {N_PHASES} volumes, got {len(base)}")
    dims = base[0].dims
    for i, vol in enumerate(base):
        if vol.dims != dims:
            raise ConfigError(f"base volume {i + 1} has dims {vol.dims}, expected {dims}")


def noise_scale(base, noise):
    lo = min(float(v.data.min()) for v in base)
    hi = max(float(v.data.max()) for v in base)
    return (hi - lo) / noise.lam


def extended_frame(base, k, drift, noise, permutation=None, scale=None):
    """Frame k (1-based) of the extended sequence"""
    order = permutation if permutation is not None else range(N_PHASES)
    source = base[list(order)[(k - 1) % N_PHASES]]
    shift_vox = drift.offset_mm(k) / source.spacing[2]

    if shift_vox == 0.0:
        data = source.data.copy()
    else:
        coords = voxel_grid(source.dims)
        coords[..., 2] += shift_vox
        data = ndimage.map_coordinates(source.data, np.moveaxis(coords, -1, 0), order=1,
                                       mode='nearest', prefilter=False)

    if noise.enabled:
        if scale is None:
            scale = noise_scale(base, noise)
        rng = substream(noise.seed, 'noise', k)
        counts = rng.poisson(noise.lam, size=data.shape)
        data = np.clip(data + scale * (counts - noise.lam), noise.clip_min, noise.clip_max)
    return source.with_data(data)


def iter_extended_sequence(base, drift, noise, permutation=None):
    _check_base(base)
    if permutation is not None and sorted(permutation) != list(range(N_PHASES)):
        raise ConfigError(f"permutation must reorder phases 0..{N_PHASES - 1}, got {permutation}")
    scale = noise_scale(base, noise) if noise.enabled else None
    for k in range(1, drift.n_frames + 1):
        yield extended_frame(base, k, drift, noise, permutation, scale)


def extend_sequence(base, drift, noise, permutation=None):
    frames = list(iter_extended_sequence(base, drift, noise, permutation))
    logger.info("extended %d base phases to %d frames (A=%.2f mm, T=%.0f s)",
                N_PHASES, len(frames), drift.amplitude_A, drift.period_T)
    return frames


@dataclass(frozen=True)
class Blob:
    center: tuple
    sigmas: tuple
    amplitude: float = 1000.0


def _as_blob(spec):
    if isinstance(spec, Blob):
        return spec
    return Blob(tuple(spec['center']), tuple(spec['sigmas']), float(spec.get('amplitude', 1000.0)))


def make_phantom(dims, blobs, offset=(0.0, 0.0, 0.0), background=0.0, spacing=(1.0, 1.0, 1.0)):
    """
    Sum of anisotropic Gaussian blobs. ``offset`` translates every blob, so
    the phantom at offset d equals the unshifted phantom evaluated at x - d.
    """
    grid = voxel_grid(dims)
    data = np.full(tuple(dims), float(background))
    for blob in map(_as_blob, blobs):
        center = np.asarray(blob.center, dtype=np.float64) + np.asarray(offset, dtype=np.float64)
        sig = np.asarray(blob.sigmas, dtype=np.float64)
        data += blob.amplitude * np.exp(-np.sum((grid - center) ** 2 / (2 * sig ** 2), axis=-1))
    return Volume3(data, spacing)


def default_blobs(dims):
    nx, ny, nz = dims
    return [
        Blob((nx / 2, ny / 2, nz / 2), (nx / 6, ny / 6, nz / 5), 800.0),
        Blob((nx / 3, 2 * ny / 3, nz / 2.5), (nx / 10, ny / 10, nz / 8), 500.0),
        Blob((2 * nx / 3, ny / 3, 3 * nz / 5), (nx / 9, ny / 8, nz / 9), 650.0),
    ]


def make_breathing_cycle(dims, blobs=None, amplitude=(0.0, 0.0, 1.5), background=100.0):
    """Ten phases of a phantom moving along a closed sinusoidal path"""
    blobs = list(blobs) if blobs else default_blobs(dims)
    amplitude = np.asarray(amplitude, dtype=np.float64)
    return [
        make_phantom(dims, blobs, offset=amplitude * math.sin(2 * math.pi * phase / N_PHASES),
                     background=background)
        for phase in range(N_PHASES)
    ]


def make_marker_series(n_frames, amplitudes, periods, drift=None, noise_sigma=0.0, seed=0,
                       sample_dt=0.4, phases=None, points=None):
    """
    Cyclic sinusoid per marker axis, plus the slow z-drift, plus Gaussian
    noise. ``amplitudes`` and ``periods`` are (r, 3) in mm and seconds.
    """
    amplitudes = np.atleast_2d(np.asarray(amplitudes, dtype=np.float64))
    r = amplitudes.shape[0]
    periods = np.broadcast_to(np.asarray(periods, dtype=np.float64), (r, 3))
    phases = np.zeros((r, 3)) if phases is None else np.broadcast_to(np.asarray(phases, dtype=np.float64), (r, 3))
    if not np.all(np.isfinite(amplitudes)):
        raise ValueError("marker amplitudes must be finite")

    t = np.arange(n_frames, dtype=np.float64) * sample_dt
    series = amplitudes[None] * np.sin(2 * math.pi * t[:, None, None] / periods[None] + phases[None])
    if drift is not None and drift.amplitude_A > 0:
        series[:, :, 2] += drift.amplitude_A * np.sin(2 * math.pi * t / drift.period_T)[:, None]
    if noise_sigma > 0:
        series = series + substream(seed, 'markers').normal(0.0, noise_sigma, size=series.shape)

    if points is None:
        points = np.zeros((r, 3))
    return TrajectorySet(points, series.reshape(n_frames, 3 * r))
