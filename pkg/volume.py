"""
Dense 3D grids and the numerical primitives built on them: trilinear
sampling, separable Gaussian filtering, subsampling, Scharr gradients,
pull-warping and the raw volume file format.

Arrays are indexed ``data[x, y, z]``. Payload files are written x-fastest
(Fortran order), which is the order ``ravel(order='F')`` produces.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from errors import (DimensionMismatchError, MalformedHeaderError, PyramidTooDeepError,
                    TruncatedPayloadError, VolumeIOError)

logger = logging.getLogger(__name__)

PAYLOAD_DTYPES = {'u16': '<u2', 'f32': '<f4', 'f64': '<f8'}


@dataclass(eq=False)
class Volume3:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"Volume3 needs a non-empty 3D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume3 data must be finite")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data):
        return Volume3(data, self.spacing)


@dataclass(eq=False)
class VectorField3:
    """Displacement per voxel in voxel units, ``data[x, y, z, component]``"""
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[3] != 3:
            raise ValueError(f"VectorField3 needs shape (nx, ny, nz, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("VectorField3 data must be finite")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape[:3]

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros(tuple(dims) + (3,)), spacing)


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    half_width: int = field(default=None)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel sigma must be > 0, got {self.sigma}")
        if self.half_width is None:
            object.__setattr__(self, 'half_width', max(1, math.ceil(3 * self.sigma)))
        if self.half_width < 1:
            raise ValueError(f"kernel half_width must be >= 1, got {self.half_width}")

    def weights(self):
        """Normalised 1D taps from -half_width to +half_width"""
        offsets = np.arange(-self.half_width, self.half_width + 1, dtype=np.float64)
        taps = np.exp(-offsets ** 2 / (2 * self.sigma ** 2))
        return taps / taps.sum()


def gaussian_pdf(distance, sigma):
    """Centred normal density evaluated at a distance"""
    return np.exp(-np.asarray(distance) ** 2 / (2 * sigma ** 2)) / math.sqrt(2 * math.pi * sigma ** 2)


def ball_kernel(sigma, h):
    """
    3D window of K_sigma(|d|) weights for integer offsets with |d| < h,
    zero elsewhere. Shape (2h+1,)*3, centred.
    """
    offsets = np.arange(-h, h + 1, dtype=np.float64)
    dx, dy, dz = np.meshgrid(offsets, offsets, offsets, indexing='ij')
    dist = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)
    weights = gaussian_pdf(dist, sigma)
    weights[dist >= h] = 0.0
    return weights


def sample_points(vol, points):
    """Trilinear samples at an (n, 3) array of voxel coordinates, clamped to the grid"""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return ndimage.map_coordinates(vol.data, points.T, order=1, mode='nearest', prefilter=False)


def trilinear_sample(vol, p):
    return float(sample_points(vol, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def gaussian_filter(vol, k, axes=(0, 1, 2)):
    """Separable convolution with replicate padding, one axis at a time"""
    taps = k.weights()
    out = vol.data
    for axis in axes:
        out = ndimage.correlate1d(out, taps, axis=axis, mode='nearest')
    return vol.with_data(out)


def subsample2(vol):
    if min(vol.dims) < 2:
        raise PyramidTooDeepError(f"cannot subsample a volume of dims {vol.dims}: pyramid too deep")
    nx, ny, nz = (d // 2 for d in vol.dims)
    return vol.with_data(vol.data[0:2 * nx:2, 0:2 * ny:2, 0:2 * nz:2].copy())


_SCHARR_DERIVATIVE = np.array([-0.5, 0.0, 0.5])
_SCHARR_SMOOTHING = np.array([3.0, 10.0, 3.0]) / 16.0


def scharr_gradient(vol):
    if min(vol.dims) < 3:
        raise ValueError(f"Scharr gradient needs at least 3 voxels per axis, got {vol.dims}")
    grads = []
    for axis in range(3):
        out = vol.data
        for other in range(3):
            taps = _SCHARR_DERIVATIVE if other == axis else _SCHARR_SMOOTHING
            out = ndimage.correlate1d(out, taps, axis=other, mode='nearest')
        grads.append(vol.with_data(out))
    return tuple(grads)


def voxel_grid(dims):
    """Integer voxel coordinates, shape (nx, ny, nz, 3)"""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)


def warp_pull(vol, dvf):
    if tuple(vol.dims) != tuple(dvf.dims):
        raise ValueError(f"volume dims {vol.dims} do not match field dims {dvf.dims}")
    coords = voxel_grid(vol.dims) + dvf.data
    warped = ndimage.map_coordinates(vol.data, np.moveaxis(coords, -1, 0), order=1,
                                     mode='nearest', prefilter=False)
    return vol.with_data(warped)


# --- file format -------------------------------------------------------------

def _payload_path(header_path, component=None):
    stem, _ = os.path.splitext(header_path)
    return f"{stem}.raw" if component is None else f"{stem}.{component}.raw"


def _write_header(path, dims, spacing, dtype, kind, components=None):
    header = {
        'dims': [int(d) for d in dims],
        'spacing': [float(s) for s in spacing],
        'dtype': dtype,
        'byte_order': 'little',
        'kind': kind,
    }
    if components is not None:
        header['components'] = list(components)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def _encode(array, dtype):
    if dtype not in PAYLOAD_DTYPES:
        raise ValueError(f"unsupported payload dtype '{dtype}'")
    if dtype == 'u16':
        array = np.clip(np.rint(array), 0, 65535)
    return np.asarray(array, dtype=PAYLOAD_DTYPES[dtype]).ravel(order='F').tobytes()


def read_header(path):
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            header = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({e})")

    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    for key in ('dims', 'spacing', 'dtype', 'byte_order'):
        if key not in header:
            raise MalformedHeaderError(f"{path}: header missing '{key}'")
    dims, spacing = header['dims'], header['spacing']
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and not isinstance(d, bool) for d in dims)):
        raise MalformedHeaderError(f"{path}: dims must be three integers, got {dims!r}")
    if min(dims) < 1:
        raise MalformedHeaderError(f"{path}: dims must all be >= 1, got {dims}")
    if not isinstance(spacing, list) or len(spacing) != 3 or not all(
            isinstance(s, (int, float)) and s > 0 for s in spacing):
        raise MalformedHeaderError(f"{path}: spacing must be three positive numbers, got {spacing!r}")
    if header['dtype'] not in PAYLOAD_DTYPES:
        raise MalformedHeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    if header['byte_order'] != 'little':
        raise MalformedHeaderError(f"{path}: unsupported byte_order {header['byte_order']!r}")
    return header


def _read_payload(payload_path, header):
    dims = tuple(header['dims'])
    dtype = np.dtype(PAYLOAD_DTYPES[header['dtype']])
    expected = int(np.prod(dims))
    if not os.path.exists(payload_path):
        raise VolumeIOError(f"payload file missing: {payload_path}")
    with open(payload_path, 'rb') as fh:
        raw = fh.read()
    if len(raw) % dtype.itemsize:
        raise TruncatedPayloadError(f"{payload_path}: payload size {len(raw)} bytes is not a "
                                    f"multiple of the {header['dtype']} item size")
    count = len(raw) // dtype.itemsize
    if count < expected:
        raise TruncatedPayloadError(f"{payload_path}: truncated payload, {count} values "
                                    f"for declared dims {list(dims)} ({expected} values)")
    if count > expected:
        raise DimensionMismatchError(f"{payload_path}: {count} values do not match "
                                     f"declared dims {list(dims)} ({expected} values)")
    data = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(dims, order='F')
    if not np.all(np.isfinite(data)):
        raise VolumeIOError(f"{payload_path}: payload contains non-finite values")
    return data


def save_volume(vol, path, dtype='f32'):
    _write_header(path, vol.dims, vol.spacing, dtype, 'volume')
    with open(_payload_path(path), 'wb') as fh:
        fh.write(_encode(vol.data, dtype))
    logger.debug("saved volume %s dims=%s", path, vol.dims)


def load_volume(path):
    header = read_header(path)
    data = _read_payload(_payload_path(path), header)
    return Volume3(data, tuple(header['spacing']))


def save_components(arrays, names, path, spacing=(1.0, 1.0, 1.0), dtype='f32', kind='vector'):
    """One header plus one payload per named component (vector fields, coefficient grids)"""
    dims = arrays[0].shape
    for arr in arrays:
        if arr.shape != dims:
            raise DimensionMismatchError(f"component shapes differ: {arr.shape} vs {dims}")
    _write_header(path, dims, spacing, dtype, kind, components=names)
    for arr, name in zip(arrays, names):
        with open(_payload_path(path, name), 'wb') as fh:
            fh.write(_encode(arr, dtype))


def load_components(path):
    header = read_header(path)
    names = header.get('components')
    if not isinstance(names, list) or not names:
        raise MalformedHeaderError(f"{path}: header has no 'components' list")
    arrays = [_read_payload(_payload_path(path, name), header) for name in names]
    return arrays, header


def save_field(dvf, path, dtype='f32'):
    save_components([dvf.data[..., i] for i in range(3)], ['x', 'y', 'z'], path,
                    spacing=dvf.spacing, dtype=dtype, kind='vector')


def load_field(path):
    arrays, header = load_components(path)
    if len(arrays) != 3:
        raise DimensionMismatchError(f"{path}: a vector field needs 3 components, got {len(arrays)}")
    return VectorField3(np.stack(arrays, axis=-1), tuple(header['spacing']))
