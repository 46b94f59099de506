"""Minimal single-file NIfTI-1 reader/writer (``.nii`` and ``.nii.gz``).

Only what the pipeline needs: up to 4 dims (the 4th holds channels), uint8,
int16 and float32 voxels, spacing from pixdim. No orientation handling.
"""
from __future__ import annotations

import gzip
import struct

import numpy as np

from .checkpoint import atomic_write
from .tensor import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
CODES = {np.dtype("u1"): 2, np.dtype("<i2"): 4, np.dtype("<f4"): 16}
BITPIX = {2: 8, 4: 16, 16: 32}


class NiftiError(ValueError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, OSError) as e:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({e})") from None
    return raw


def read_nifti(path) -> Volume:
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"{path}: header size field is {sizeof_hdr}, expected {HEADER_SIZE} "
                         "(big-endian files are not supported)")
    magic = raw[344:348]
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} is not single-file NIfTI-1 (n+1)")
    dim = struct.unpack("<8h", raw[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise NiftiError(f"{path}: {ndim} dims; only 1 to 4 are supported")
    (datatype,) = struct.unpack("<h", raw[70:72])
    if datatype not in DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} is not uint8, int16 or float32")
    pixdim = struct.unpack("<8f", raw[76:108])
    (vox_offset,) = struct.unpack("<f", raw[108:112])
    scl_slope, scl_inter = struct.unpack("<2f", raw[112:120])
    shape = [max(int(d), 1) for d in dim[1:ndim + 1]] + [1] * (4 - ndim)
    dtype = DTYPES[datatype]
    n = int(np.prod(shape))
    start = int(vox_offset)
    if len(raw) < start + n * dtype.itemsize:
        raise TruncatedFileError(f"{path}: expected {n * dtype.itemsize} bytes of voxel data, "
                                 f"found {max(len(raw) - start, 0)}")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=start).reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data.astype(np.float32) * np.float32(scl_slope or 1.0) + np.float32(scl_inter)
    data = np.ascontiguousarray(np.moveaxis(data, 3, 0))
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume(data, spacing)


def encode_nifti(volume: Volume) -> bytes:
    data = volume.data
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    dtype = data.dtype.newbyteorder("<") if data.dtype.itemsize > 1 else data.dtype
    if dtype not in CODES:
        if np.issubdtype(data.dtype, np.integer) and data.min() >= -32768 and data.max() <= 32767:
            dtype = np.dtype("<i2")
        elif np.issubdtype(data.dtype, np.floating):
            dtype = np.dtype("<f4")
        else:
            raise UnsupportedDatatypeError(f"cannot store {data.dtype} voxels")
    code = CODES[dtype]
    c = data.shape[0]
    spatial = data.shape[1:]
    ndim = 4 if c > 1 else 3
    dim = [ndim, *spatial, c if c > 1 else 1, 1, 1, 1][:8]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, code, BITPIX[code])
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 10)  # xyzt_units: mm, seconds
    hdr[344:348] = MAGIC
    body = np.moveaxis(data.astype(dtype, copy=False), 0, 3).reshape(-1, order="F").tobytes()
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body


def write_nifti(volume, path, spacing=None):
    if not isinstance(volume, Volume):
        volume = Volume(np.asarray(volume), spacing or (1.0, 1.0, 1.0))
    buf = encode_nifti(volume)
    if str(path).endswith(".gz"):
        buf = gzip.compress(buf, mtime=0)
    atomic_write(path, buf)
