"""Minimal NIfTI-1 reader: single-file .nii, uint8/int16/float32, spacing only.

Orientation (qform/sform) is deliberately ignored; only dim[1..3] and
pixdim[1..3] are consumed.
"""

from __future__ import annotations

import struct

import numpy as np

from .volume import LabelVolume, Volume

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

# datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),   # uint8
    4: np.dtype("<i2"),   # int16
    16: np.dtype("<f4"),  # float32
}


class NiftiError(ValueError):
    """Base class for NIfTI parse failures."""


class NiftiBadMagic(NiftiError):
    pass


class NiftiUnsupportedDatatype(NiftiError):
    pass


class NiftiTruncated(NiftiError):
    pass


class NiftiBadPixdim(NiftiError):
    pass


class NiftiBadDim(NiftiError):
    pass


def load_nifti(raw: bytes) -> Volume:
    """Parse a single-file NIfTI-1 byte string into a Volume.

    Applies scl_slope/scl_inter when scl_slope is nonzero.  Trailing volumes
    beyond the first 3-D frame are rejected via dim[0] checks.
    """
    if len(raw) < HEADER_SIZE:
        raise NiftiTruncated(f"stream shorter than the {HEADER_SIZE}-byte header")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiBadMagic(f"sizeof_hdr={sizeof_hdr}, expected {HEADER_SIZE}")
    magic = raw[344:348]
    if magic != MAGIC_SINGLE:
        raise NiftiBadMagic(f"magic {magic!r}, expected {MAGIC_SINGLE!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] < 3:
        raise NiftiBadDim(f"dim[0]={dim[0]}, need at least 3 spatial dims")
    if dim[0] > 3 and any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise NiftiBadDim("multi-frame images are not supported")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d <= 0 for d in dims):
        raise NiftiBadDim(f"non-positive spatial dims {dims}")

    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise NiftiUnsupportedDatatype(f"datatype code {datatype} not supported")
    dtype = _DTYPES[datatype]

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not (s > 0 and np.isfinite(s)) for s in spacing):
        raise NiftiBadPixdim(f"non-positive pixdim {spacing}")

    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    scl_slope = struct.unpack_from("<f", raw, 112)[0]
    scl_inter = struct.unpack_from("<f", raw, 116)[0]

    n = dims[0] * dims[1] * dims[2]
    need = vox_offset + n * dtype.itemsize
    if len(raw) < need:
        raise NiftiTruncated(
            f"data section has {len(raw) - vox_offset} bytes, need {n * dtype.itemsize}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=vox_offset)
    data = data.astype(np.float32)
    if scl_slope != 0.0:
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    # NIfTI stores x fastest, matching our layout.
    return Volume(dims, spacing, np.ascontiguousarray(data))


def as_label_volume(v: Volume, class_count: int | None = None) -> LabelVolume:
    """Reinterpret an integer-valued volume as a label map."""
    labels = np.rint(v.data).astype(np.int32)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return LabelVolume(v.dims, v.spacing, labels, class_count)


def build_nifti(v: Volume, datatype: int = 16, scl_slope: float = 0.0,
                scl_inter: float = 0.0, vox_offset: int = 352) -> bytes:
    """Assemble a single-file NIfTI-1 byte string (testing and export aid)."""
    if datatype not in _DTYPES:
        raise NiftiUnsupportedDatatype(f"datatype code {datatype} not supported")
    dtype = _DTYPES[datatype]
    hdr = bytearray(vox_offset)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(vox_offset))
    struct.pack_into("<f", hdr, 112, scl_slope)
    struct.pack_into("<f", hdr, 116, scl_inter)
    hdr[344:348] = MAGIC_SINGLE
    payload = np.ascontiguousarray(v.data.astype(dtype)).tobytes()
    return bytes(hdr) + payload
