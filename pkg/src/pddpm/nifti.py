"""Minimal single-file NIfTI-1 reader/writer.

Covers the subset this project needs: uncompressed or gzipped ``.nii`` files,
scalar datatypes, up to 4 dimensions, little or big endian, scl slope/inter
scaling.  Arrays are exchanged in C order with axes (x, y, z[, t]).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

_HDR_SIZE = 348
_VOX_OFFSET = 352.0

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(np.float32): 16, np.dtype(np.float64): 64}


class NiftiError(ValueError):
    pass


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Return (data, voxel spacing); data has shape (nx, ny, nz[, nt])."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HDR_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI-1 header")
    sizeof_hdr = struct.unpack("<i", raw[:4])[0]
    bo = "<"
    if sizeof_hdr != _HDR_SIZE:
        sizeof_hdr = struct.unpack(">i", raw[:4])[0]
        bo = ">"
        if sizeof_hdr != _HDR_SIZE:
            raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise NiftiError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack(bo + "8h", raw[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise NiftiError(f"{path}: unsupported ndim {ndim}")
    shape = tuple(max(1, d) for d in dim[1 : 1 + ndim])
    datatype = struct.unpack(bo + "h", raw[70:72])[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    vox_offset = int(struct.unpack(bo + "f", raw[108:112])[0])
    scl_slope, scl_inter = struct.unpack(bo + "2f", raw[112:120])
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    spacing = tuple(float(p) for p in pixdim[1 : 1 + min(ndim, 3)])
    return np.ascontiguousarray(data), spacing


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write data of shape (nx, ny, nz[, nt]) as float32 or float64."""
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise NiftiError(f"can only write 3D/4D volumes, got ndim {data.ndim}")
    if data.dtype not in _CODES:
        data = data.astype(np.float32)
    code = _CODES[data.dtype]
    bitpix = data.dtype.itemsize * 8
    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    pixdim = [0.0, *[float(s) for s in spacing]] + [1.0] * (7 - len(spacing))

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, _VOX_OFFSET)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[344:348] = b"n+1\x00"

    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # extension flag
        f.write(np.asfortranarray(data).tobytes(order="F"))
