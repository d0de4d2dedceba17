"""
Linear correspondence between marker displacements and the full
displacement field, and Nadaraya-Watson forward warping of the reference
image by a reconstructed field.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import (ConfigError, DimensionMismatchError, EmptyInputError, LengthMismatchError,
                    MalformedHeaderError)
from volume import VectorField3, gaussian_pdf, load_components, save_components, voxel_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WarpParams:
    sigma_w: float = 0.5
    h: int = 3
    fill_value: float = 0.0

    def validate(self):
        if not self.sigma_w > 0:
            raise ConfigError(f"warp.sigma_w must be > 0, got {self.sigma_w}")
        if int(self.h) != self.h or self.h < 1:
            raise ConfigError(f"warp.h must be an integer >= 1, got {self.h}")


@dataclass(eq=False)
class CorrespondenceModel:
    """
    ``gamma[x, y, z, p]`` weights marker p's displacement at voxel (x, y, z).
    The same coefficient applies to all three components.
    """
    gamma: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    rank: int = None
    rank_deficient: bool = False
    residual_rms: float = None

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.gamma.ndim != 4:
            raise ValueError(f"gamma must have shape (nx, ny, nz, r), got {self.gamma.shape}")
        if not np.all(np.isfinite(self.gamma)):
            raise ValueError("correspondence coefficients must be finite")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.gamma.shape[:3]

    @property
    def r(self):
        return self.gamma.shape[3]


def _markers_in_voxels(row_mm, r, spacing):
    row = np.asarray(row_mm, dtype=np.float64).ravel()
    if row.size != 3 * r:
        raise LengthMismatchError(f"marker row has {row.size} values, expected {3 * r}")
    return row.reshape(r, 3) / np.asarray(spacing)


def fit_correspondence(dvfs, series_mm, spacing=None):
    """
    Per-voxel least squares for gamma over the training frames. The normal
    equations are accumulated frame by frame, so ``dvfs`` may be a generator.
    ``series_mm`` holds the matching marker rows (N x 3r, mm).
    """
    series_mm = np.asarray(series_mm, dtype=np.float64)
    if series_mm.ndim != 2 or series_mm.shape[1] % 3:
        raise ValueError(f"marker series must be (N, 3r), got shape {series_mm.shape}")
    r = series_mm.shape[1] // 3

    gram = np.zeros((r, r))
    cross = None
    energy = None
    n_frames = 0
    dims = None
    for n, dvf in enumerate(dvfs):
        if n >= series_mm.shape[0]:
            raise LengthMismatchError(f"more fields than the {series_mm.shape[0]} marker rows")
        if dims is None:
            dims = dvf.dims
            spacing = dvf.spacing if spacing is None else spacing
            cross = np.zeros((int(np.prod(dims)), r))
            energy = np.zeros(int(np.prod(dims)))
        elif dvf.dims != dims:
            raise DimensionMismatchError(f"field {n} has dims {dvf.dims}, expected {dims}")
        markers = _markers_in_voxels(series_mm[n], r, spacing)
        field = dvf.data.reshape(-1, 3)
        gram += markers @ markers.T
        cross += field @ markers.T
        energy += np.sum(field ** 2, axis=1)
        n_frames += 1

    if n_frames == 0:
        raise EmptyInputError("no training fields for the correspondence fit")
    if n_frames != series_mm.shape[0]:
        raise LengthMismatchError(f"{n_frames} fields for {series_mm.shape[0]} marker rows")

    rank = int(np.linalg.matrix_rank(gram))
    deficient = rank < r
    if deficient:
        logger.warning("correspondence fit: marker design has rank %d < %d, using the minimum-norm solution",
                       rank, r)
    gamma = cross @ np.linalg.pinv(gram).T

    # sum_n |u - gamma M|^2 expanded in the accumulated moments
    sse = energy - 2 * np.sum(gamma * cross, axis=1) + np.einsum('vp,pq,vq->v', gamma, gram, gamma)
    residual_rms = math.sqrt(max(float(sse.sum()), 0.0) / (3 * n_frames * len(sse)))
    logger.info("fitted correspondence model on %d frames, %d markers, residual %.3g voxels",
                n_frames, r, residual_rms)
    return CorrespondenceModel(gamma.reshape(tuple(dims) + (r,)), spacing, rank, deficient, residual_rms)


def reconstruct_dvf(model, marker_row_mm):
    markers = _markers_in_voxels(marker_row_mm, model.r, model.spacing)
    return VectorField3(model.gamma @ markers, model.spacing)


def nw_forward_warp(src, dvf, wp):
    """
    Every source voxel p lands at p + u(p) and spreads its intensity over
    the target voxels within distance h with Gaussian weights; each target
    voxel is the weighted mean of what reached it, or fill_value if nothing did.
    """
    if tuple(src.dims) != tuple(dvf.dims):
        raise DimensionMismatchError(f"volume dims {src.dims} do not match field dims {dvf.dims}")
    h = int(wp.h)
    dims = np.asarray(src.dims)
    landing = (voxel_grid(src.dims) + dvf.data).reshape(-1, 3)
    base = np.floor(landing).astype(np.int64)
    intensity = src.data.ravel()
    n_voxels = intensity.size

    numerator = np.zeros(n_voxels)
    denominator = np.zeros(n_voxels)
    offsets = range(-h + 1, h + 1)
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                target = base + (ox, oy, oz)
                dist = np.sqrt(np.sum((target - landing) ** 2, axis=1))
                keep = (dist < h) & np.all((target >= 0) & (target < dims), axis=1)
                if not keep.any():
                    continue
                flat = np.ravel_multi_index(target[keep].T, src.dims)
                weight = gaussian_pdf(dist[keep], wp.sigma_w)
                numerator += np.bincount(flat, weights=weight * intensity[keep], minlength=n_voxels)
                denominator += np.bincount(flat, weights=weight, minlength=n_voxels)

    out = np.full(n_voxels, float(wp.fill_value))
    reached = denominator > 0
    out[reached] = numerator[reached] / denominator[reached]
    if not reached.all():
        logger.debug("forward warp: %d voxels without antecedent", int((~reached).sum()))
    return src.with_data(out.reshape(src.dims))


def predict_image(src, model, marker_row_mm, wp):
    if tuple(src.dims) != tuple(model.dims):
        raise DimensionMismatchError(f"volume dims {src.dims} do not match model dims {model.dims}")
    return nw_forward_warp(src, reconstruct_dvf(model, marker_row_mm), wp)


def save_model(model, path):
    names = [f"g{p + 1}" for p in range(model.r)]
    save_components([model.gamma[..., p] for p in range(model.r)], names, path,
                    spacing=model.spacing, dtype='f64', kind='coefficients')


def load_model(path):
    arrays, header = load_components(path)
    if header.get('kind') != 'coefficients':
        raise MalformedHeaderError(f"{path}: expected a coefficients file, got kind {header.get('kind')!r}")
    return CorrespondenceModel(np.stack(arrays, axis=-1), tuple(header['spacing']))
