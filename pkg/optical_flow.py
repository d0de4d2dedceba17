"""
Pyramidal iterative Lucas-Kanade registration of 3D volumes, the
registration error of a displacement-field sequence, and the parameter
grid search over both.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import ndimage

import gridsearch
from errors import ConfigError, LengthMismatchError, PyramidTooDeepError
from volume import (GaussianKernel, VectorField3, ball_kernel, gaussian_filter, scharr_gradient,
                    subsample2, voxel_grid, warp_pull)

logger = logging.getLogger(__name__)

FLOW_PARAMS = ('sigma_init', 'sigma_sub', 'sigma_lk', 'n_layers', 'n_iter')

DEFAULT_FLOW_GRID = {
    'sigma_init': [0.2, 0.5, 1.0, 2.0],
    'sigma_sub': [0.2, 0.5, 1.0, 2.0],
    'sigma_lk': [1.0, 2.0, 3.0, 4.0],
    'n_layers': [1, 2, 3, 4],
    'n_iter': [1, 2, 3],
}


@dataclass(frozen=True)
class FlowParams:
    sigma_init: float = 0.2
    sigma_sub: float = 0.2
    sigma_lk: float = 2.0
    n_layers: int = 3
    n_iter: int = 3
    lk_window_h: int = field(default=None)
    tensor_epsilon: float = 1e-3

    def __post_init__(self):
        if self.lk_window_h is None and self.sigma_lk > 0:
            object.__setattr__(self, 'lk_window_h', max(1, math.ceil(2 * self.sigma_lk)))

    def validate(self):
        for name in ('sigma_init', 'sigma_sub', 'sigma_lk'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"flow.{name} must be > 0, got {getattr(self, name)}")
        if self.n_layers < 1:
            raise ConfigError(f"flow.n_layers must be >= 1, got {self.n_layers}")
        if self.n_iter < 1:
            raise ConfigError(f"flow.n_iter must be >= 1, got {self.n_iter}")
        if self.lk_window_h is None or self.lk_window_h < 1:
            raise ConfigError(f"flow.lk_window_h must be >= 1, got {self.lk_window_h}")
        if self.tensor_epsilon < 0:
            raise ConfigError(f"flow.tensor_epsilon must be >= 0, got {self.tensor_epsilon}")

    def replace(self, **changes):
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        if 'sigma_lk' in changes and 'lk_window_h' not in changes:
            values['lk_window_h'] = None
        return FlowParams(**values)


@dataclass(eq=False)
class Pyramid:
    levels: list

    def __len__(self):
        return len(self.levels)


def build_pyramid(vol, p):
    need = 2 ** (p.n_layers - 1)
    if min(vol.dims) < need:
        raise PyramidTooDeepError(
            f"{p.n_layers} layers need at least {need} voxels per axis, volume has {vol.dims}")
    levels = [gaussian_filter(vol, GaussianKernel(p.sigma_init))]
    sub_kernel = GaussianKernel(p.sigma_sub)
    for _ in range(p.n_layers - 1):
        levels.append(subsample2(gaussian_filter(levels[-1], sub_kernel)))
    return Pyramid(levels)


def _window_sum(array, window):
    # Sum over in-grid neighbours only
    return ndimage.correlate(array, window, mode='constant', cval=0.0)


def _lk_window(p):
    return ball_kernel(p.sigma_lk, p.lk_window_h)


def structure_tensor(level, p, gradients=None):
    """Windowed second-moment matrix of the Scharr gradients, shape (nx, ny, nz, 3, 3)"""
    grads = gradients if gradients is not None else scharr_gradient(level)
    g = [gr.data for gr in grads]
    window = _lk_window(p)
    tensor = np.empty(level.dims + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            tensor[..., i, j] = _window_sum(g[i] * g[j], window)
            tensor[..., j, i] = tensor[..., i, j]
    return tensor


def _regularised_solve(tensor, b, tensor_epsilon):
    eps = tensor_epsilon * np.trace(tensor, axis1=-2, axis2=-1) / 3.0 + 1e-12
    system = tensor + eps[..., None, None] * np.eye(3)
    return np.linalg.solve(system, b[..., None])[..., 0]


def _upsample_guess(coarse, fine_dims):
    """g_{l-1}(x) = 2 * coarse(x / 2), trilinear per component"""
    coords = np.moveaxis(voxel_grid(fine_dims) / 2.0, -1, 0)
    out = np.empty(tuple(fine_dims) + (3,))
    for c in range(3):
        out[..., c] = 2.0 * ndimage.map_coordinates(coarse[..., c], coords, order=1,
                                                     mode='nearest', prefilter=False)
    return out


@dataclass(eq=False)
class _ReferenceLevel:
    image: object
    gradients: tuple
    tensor: np.ndarray


def prepare_reference(I, p):
    """Pyramid, gradients and structure tensors of the reference image, reusable across frames"""
    pyramid = build_pyramid(I, p)
    levels = []
    for level in pyramid.levels:
        if min(level.dims) < 3:
            raise PyramidTooDeepError(
                f"pyramid level of dims {level.dims} is too small for gradient estimation")
        grads = scharr_gradient(level)
        levels.append(_ReferenceLevel(level, grads, structure_tensor(level, p, grads)))
    return levels


def register_prepared(reference, J, p):
    if tuple(reference[0].image.dims) != tuple(J.dims):
        raise ValueError(f"image dims differ: {reference[0].image.dims} vs {J.dims}")
    target = build_pyramid(J, p)
    window = _lk_window(p)

    guess = np.zeros(reference[-1].image.dims + (3,))
    refinement = np.zeros_like(guess)
    for l in range(p.n_layers - 1, -1, -1):
        ref = reference[l]
        J_l = target.levels[l]
        grads = [gr.data for gr in ref.gradients]
        refinement = np.zeros_like(guess)
        for _ in range(p.n_iter):
            warped = warp_pull(J_l, VectorField3(guess + refinement))
            delta = ref.image.data - warped.data
            b = np.stack([_window_sum(delta * g, window) for g in grads], axis=-1)
            refinement = refinement + _regularised_solve(ref.tensor, b, p.tensor_epsilon)
        if l > 0:
            guess = _upsample_guess(guess + refinement, reference[l - 1].image.dims)

    return VectorField3(guess + refinement, reference[0].image.spacing)


def lk_register(I, J, p):
    if tuple(I.dims) != tuple(J.dims):
        raise ValueError(f"image dims differ: {I.dims} vs {J.dims}")
    return register_prepared(prepare_reference(I, p), J, p)


def register_sequence(frames, p):
    """Fields from frame 1 to every frame; the first one is identically zero"""
    frames = list(frames)
    reference = prepare_reference(frames[0], p)
    dvfs = [VectorField3.zeros(frames[0].dims, frames[0].spacing)]
    for k, frame in enumerate(frames[1:], start=2):
        dvfs.append(register_prepared(reference, frame, p))
        logger.debug("registered frame %d/%d", k, len(frames))
    return dvfs


def registration_error(seq, dvfs, mask=None):
    """
    Root mean square over frames 2..n of I(x, t_1) - I(x + u(x, t_k), t_k);
    ``dvfs[k-2]`` is the field of frame k.
    """
    seq = list(seq)
    dvfs = list(dvfs)
    if len(seq) < 2 or len(dvfs) != len(seq) - 1:
        raise LengthMismatchError(
            f"expected {len(seq) - 1} fields for {len(seq)} frames, got {len(dvfs)}")
    reference = seq[0].data
    total, count = 0.0, 0
    for frame, dvf in zip(seq[1:], dvfs):
        residual = reference - warp_pull(frame, dvf).data
        if mask is not None:
            residual = residual[mask]
        total += float(np.sum(residual ** 2))
        count += residual.size
    return math.sqrt(total / count)


def _evaluate_flow_tuple(args):
    seq, params, mask = args
    try:
        dvfs = register_sequence(seq, params)
        return registration_error(seq, dvfs[1:], mask), True
    except PyramidTooDeepError as e:
        logger.warning("skipping %s: %s", params, e)
        return float('nan'), False


def flow_grid_search(seq, grid, mask=None, base_params=None, n_workers=1):
    seq = list(seq)
    base = base_params or FlowParams()
    combos = gridsearch.expand_grid(grid, FLOW_PARAMS)
    candidates = [base.replace(**combo) for combo in combos]
    for params in candidates:
        params.validate()
    results = gridsearch.parallel_map(_evaluate_flow_tuple,
                                      [(seq, params, mask) for params in candidates], n_workers)

    rows = []
    for combo, (e_dvf, valid) in zip(combos, results):
        rows.append(dict(combo, e_dvf=e_dvf, valid=valid))
    table = pd.DataFrame(rows, columns=list(FLOW_PARAMS) + ['e_dvf', 'valid'])
    logger.info("flow grid search evaluated %d parameter tuples", len(table))
    return gridsearch.summarize(table, FLOW_PARAMS, 'e_dvf')
