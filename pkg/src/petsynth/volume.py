"""Volumes, masks and trilinear resampling.

Voxel arrays are indexed ``data[x, y, z]``; serialized forms use x-fastest
order.  Volumes and masks are immutable once built.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .transform import AffineTransform


class VolumeError(ValueError):
    pass


class ShapeMismatchError(VolumeError):
    pass


class EmptyMaskError(VolumeError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Volume3D:
    """A 3D scalar field with voxel spacing (mm) and a voxel-to-world affine."""

    __slots__ = ("data", "spacing", "affine")

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), affine=None):
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise VolumeError(f"volume dims must be >= 1, got {arr.shape}")
        sp = np.array(spacing, dtype=np.float64).reshape(3)
        if not np.all(sp > 0):
            raise VolumeError(f"spacing must be positive, got {tuple(sp)}")
        if affine is None:
            aff = np.diag([*sp, 1.0])
        else:
            aff = np.array(affine, dtype=np.float64).reshape(4, 4)
            if not np.array_equal(aff[3], [0.0, 0.0, 0.0, 1.0]):
                raise VolumeError("affine last row must be (0, 0, 0, 1)")
            if abs(np.linalg.det(aff[:3, :3])) < 1e-12:
                raise VolumeError("affine 3x3 block is singular")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _frozen(sp))
        object.__setattr__(self, "affine", _frozen(aff))

    def __setattr__(self, name, value):
        raise AttributeError("Volume3D is immutable")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def with_data(self, data) -> Volume3D:
        """Same geometry, new voxel values."""
        return Volume3D(data, self.spacing, self.affine)

    def same_grid(self, other) -> bool:
        return self.dims == other.dims

    def __repr__(self):
        return f"Volume3D(dims={self.dims}, spacing={tuple(self.spacing)})"

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (np.array_equal(self.data, other.data)
                and np.array_equal(self.spacing, other.spacing)
                and np.array_equal(self.affine, other.affine))

    __hash__ = None


class MaskLabel(enum.Enum):
    BRAIN = "brain"
    CEREBELLUM_CORTEX = "cerebellum-cortex"


@dataclass(frozen=True, eq=False)
class Mask3D:
    data: np.ndarray
    label: MaskLabel = MaskLabel.BRAIN

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim != 3:
            raise VolumeError(f"mask data must be 3D, got shape {arr.shape}")
        if arr.dtype != bool:
            if not np.all((arr == 0) | (arr == 1)):
                raise VolumeError("mask values must be 0 or 1")
            arr = arr.astype(bool)
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "label", MaskLabel(self.label))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, Mask3D):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DynamicSeries:
    """Time-stamped PET frames; times in minutes."""

    frames: tuple
    frame_start: np.ndarray
    frame_duration: np.ndarray

    def __post_init__(self):
        frames = tuple(self.frames)
        start = np.array(self.frame_start, dtype=np.float64).reshape(-1)
        dur = np.array(self.frame_duration, dtype=np.float64).reshape(-1)
        if not frames:
            raise VolumeError("dynamic series needs at least one frame")
        if not (len(frames) == start.size == dur.size):
            raise VolumeError("frames, starts and durations must have equal length")
        if any(f.dims != frames[0].dims for f in frames):
            raise ShapeMismatchError("all frames must share dims")
        if np.any(np.diff(start) <= 0):
            raise VolumeError("frame starts must be strictly increasing")
        if np.any(dur <= 0):
            raise VolumeError("frame durations must be positive")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_start", _frozen(start))
        object.__setattr__(self, "frame_duration", _frozen(dur))

    def __len__(self):
        return len(self.frames)

    @property
    def frame_end(self) -> np.ndarray:
        return self.frame_start + self.frame_duration


class MaskedStats(NamedTuple):
    mean: float
    std: float
    min: float
    max: float


def _check_dims(vol: Volume3D, mask: Mask3D):
    if vol.dims != mask.dims:
        raise ShapeMismatchError(f"mask dims {mask.dims} do not match volume dims {vol.dims}")


def apply_mask(vol: Volume3D, mask: Mask3D) -> Volume3D:
    _check_dims(vol, mask)
    return vol.with_data(vol.data * mask.data.astype(np.float32))


def masked_stats(vol: Volume3D, mask: Mask3D) -> MaskedStats:
    """Mean, population std, min and max over the masked voxels."""
    _check_dims(vol, mask)
    vals = vol.data[mask.data].astype(np.float64)
    if vals.size == 0:
        raise EmptyMaskError(f"{mask.label.value} mask has no set voxels")
    mean = vals.mean()
    std = np.sqrt(np.mean((vals - mean) ** 2))
    return MaskedStats(float(mean), float(std), float(vals.min()), float(vals.max()))


def trilinear_sample(data: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``data`` at fractional voxel ``coords`` of shape ``(3, ...)``.

    Returns ``(values, inside)``; samples outside ``[0, n-1]`` on any axis
    are 0 and flagged ``False`` in ``inside``.
    """
    shape = data.shape
    inside = np.ones(coords.shape[1:], dtype=bool)
    lo, frac = [], []
    for ax in range(3):
        c = coords[ax]
        inside &= (c >= 0) & (c <= shape[ax] - 1)
        f = np.floor(c)
        lo.append(np.clip(f, 0, shape[ax] - 1).astype(np.intp))
        frac.append(np.where(inside, c - f, 0.0))
    hi = [np.minimum(lo[ax] + 1, shape[ax] - 1) for ax in range(3)]
    src = data.astype(np.float64, copy=False)
    fx, fy, fz = frac
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    out = (src[x0, y0, z0] * (gx * gy * gz)
           + src[x1, y0, z0] * (fx * gy * gz)
           + src[x0, y1, z0] * (gx * fy * gz)
           + src[x1, y1, z0] * (fx * fy * gz)
           + src[x0, y0, z1] * (gx * gy * fz)
           + src[x1, y0, z1] * (fx * gy * fz)
           + src[x0, y1, z1] * (gx * fy * fz)
           + src[x1, y1, z1] * (fx * fy * fz))
    return np.where(inside, out, 0.0), inside


def voxel_map(transform: AffineTransform, src_spacing, out_spacing) -> tuple[np.ndarray, np.ndarray]:
    """Output-voxel -> source-voxel affine for resampling through ``transform``.

    Scaling is folded in elementwise so that an identity transform between
    equal spacings gives an exactly-identity map.
    """
    inv = transform.inverse()
    s_src = np.asarray(src_spacing, dtype=np.float64)
    s_out = np.asarray(out_spacing, dtype=np.float64)
    M = inv.matrix * (s_out[None, :] / s_src[:, None])
    off = inv.translation / s_src
    return M, off


def resample_coords(dims: Sequence[int], M: np.ndarray, off: np.ndarray) -> np.ndarray:
    idx = np.indices(tuple(dims), dtype=np.float64)
    return np.einsum("ij,j...->i...", M, idx) + off[:, None, None, None]


def resample_affine(src: Volume3D, transform: AffineTransform, target_dims=None,
                    *, reference: Volume3D | None = None) -> Volume3D:
    """Resample ``src`` through ``transform`` onto a target grid.

    Output voxel ``v`` takes the trilinear interpolation of ``src`` at
    ``transform^-1(v)``; samples falling outside the source field are 0.
    The target grid is ``reference``'s when given, otherwise ``target_dims``
    at the source spacing.
    """
    if reference is not None:
        dims, spacing, affine = reference.dims, reference.spacing, reference.affine
    else:
        dims = src.dims if target_dims is None else tuple(int(n) for n in target_dims)
        spacing, affine = src.spacing, src.affine
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeError(f"target dims must be three positive ints, got {dims}")
    M, off = voxel_map(transform, src.spacing, spacing)
    if dims == src.dims and np.array_equal(M, np.eye(3)) and not off.any():
        return Volume3D(src.data, spacing, affine)
    values, _ = trilinear_sample(src.data, resample_coords(dims, M, off))
    return Volume3D(values, spacing, affine)


def dice(a: Mask3D | np.ndarray, b: Mask3D | np.ndarray) -> float:
    x = a.data if isinstance(a, Mask3D) else np.asarray(a, dtype=bool)
    y = b.data if isinstance(b, Mask3D) else np.asarray(b, dtype=bool)
    denom = x.sum() + y.sum()
    return 1.0 if denom == 0 else float(2.0 * np.logical_and(x, y).sum() / denom)
