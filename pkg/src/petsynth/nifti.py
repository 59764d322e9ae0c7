"""Single-file NIfTI-1 subset I/O plus a tiny native container for fixtures.

Supported: little-endian ``.nii`` files with magic ``n+1\\0``, datatype
float32 or int16, 3D or 4D, data at ``vox_offset=352``.  Writing always
produces float32 with an sform (``srow_*``) carrying the affine.
"""
from __future__ import annotations

import struct

import numpy as np

from .volume import DynamicSeries, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: np.dtype("<i2"), DT_FLOAT32: np.dtype("<f4")}

NATIVE_MAGIC = b"PSV3"


class NiftiError(ValueError):
    pass


class UnsupportedFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


def _build_header(dims, spacing, affine, *, tdim=None, tstep=1.0, toffset=0.0) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [4 if tdim else 3, *dims, tdim or 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, DT_FLOAT32)
    struct.pack_into("<h", hdr, 72, 32)
    pixdim = [1.0, *(float(s) for s in spacing), float(tstep), 0.0, 0.0, 0.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<B", hdr, 123, 2 | 8)  # mm, seconds
    struct.pack_into("<f", hdr, 132, float(toffset))
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    struct.pack_into("<h", hdr, 254, 2)  # sform_code: aligned
    aff = np.asarray(affine, dtype=np.float64)
    for row, off in zip(range(3), (280, 296, 312)):
        struct.pack_into("<4f", hdr, off, *aff[row])
    hdr[344:348] = b"n+1\0"
    return bytes(hdr)


def _write(path, header: bytes, data: np.ndarray):
    payload = np.asarray(data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\0\0\0\0")
        fh.write(payload)


def write_nifti(vol: Volume3D, path) -> None:
    _write(path, _build_header(vol.dims, vol.spacing, vol.affine), vol.data)


def write_dynamic(series: DynamicSeries, path) -> None:
    """Write a 4D file.

    Frames must be contiguous and uniform; timing is stored in seconds in
    ``pixdim[4]`` and ``toffset`` (NIfTI has no minutes unit).
    """
    dur = series.frame_duration
    if not np.allclose(dur, dur[0]) or not np.allclose(np.diff(series.frame_start), dur[0]):
        raise NiftiError("only contiguous uniform frame timing fits in a NIfTI-1 header")
    first = series.frames[0]
    hdr = _build_header(first.dims, first.spacing, first.affine, tdim=len(series),
                        tstep=dur[0] * 60.0, toffset=series.frame_start[0] * 60.0)
    _write(path, hdr, np.stack([f.data for f in series.frames], axis=-1))


def _read(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] != HEADER_SIZE:
        raise UnsupportedFormatError(f"{path}: not a little-endian NIfTI-1 header")
    magic = raw[344:348]
    if magic != b"n+1\0":
        raise UnsupportedFormatError(f"{path}: magic {magic!r} is not single-file NIfTI-1")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedFormatError(f"{path}: {ndim}D images are not supported")
    shape = tuple(int(d) for d in dim[1:ndim + 1])
    if ndim == 4 and shape[3] == 1:
        ndim, shape = 3, shape[:3]
    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} is not float32/int16")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    slope, inter = struct.unpack_from("<2f", raw, 112)
    toffset = struct.unpack_from("<f", raw, 132)[0]
    sform_code = struct.unpack_from("<h", raw, 254)[0]
    dt = _DTYPES[datatype]
    n = int(np.prod(shape))
    end = vox_offset + n * dt.itemsize
    if len(raw) < end:
        raise TruncatedDataError(f"{path}: expected {end} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dt, count=n, offset=vox_offset).reshape(shape, order="F")
    if datatype == DT_INT16:
        if slope == 0:
            slope, inter = 1.0, 0.0
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        affine = np.eye(4)
        for row, off in zip(range(3), (280, 296, 312)):
            affine[row] = struct.unpack_from("<4f", raw, off)
    else:
        affine = np.diag([*spacing, 1.0])
    return data, spacing, affine, float(pixdim[4]), float(toffset)


def read_nifti(path) -> Volume3D:
    data, spacing, affine, _, _ = _read(path)
    if data.ndim != 3:
        raise UnsupportedFormatError(f"{path}: 4D image; use read_dynamic")
    return Volume3D(data, spacing, affine)


def read_dynamic(path) -> DynamicSeries:
    data, spacing, affine, tstep, toffset = _read(path)
    if data.ndim == 3:
        data = data[..., None]
    frames = [Volume3D(data[..., t], spacing, affine) for t in range(data.shape[3])]
    step = tstep / 60.0 if tstep > 0 else 1.0
    starts = toffset / 60.0 + step * np.arange(len(frames))
    return DynamicSeries(frames, starts, np.full(len(frames), step))


def write_native(vol: Volume3D, path) -> None:
    """Self-describing debug container: magic, dims, spacing, affine, float32 data."""
    with open(path, "wb") as fh:
        fh.write(NATIVE_MAGIC)
        fh.write(struct.pack("<3I", *vol.dims))
        fh.write(struct.pack("<3d", *vol.spacing))
        fh.write(struct.pack("<16d", *np.asarray(vol.affine).ravel()))
        fh.write(np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes())


def read_native(path) -> Volume3D:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != NATIVE_MAGIC:
        raise UnsupportedFormatError(f"{path}: not a native volume container")
    dims = struct.unpack_from("<3I", raw, 4)
    spacing = struct.unpack_from("<3d", raw, 16)
    affine = np.array(struct.unpack_from("<16d", raw, 40)).reshape(4, 4)
    n = int(np.prod(dims))
    if len(raw) < 168 + 4 * n:
        raise TruncatedDataError(f"{path}: truncated voxel data")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=168).reshape(dims, order="F")
    return Volume3D(data, spacing, affine)
