"""File formats: the native RVOL container family, NIfTI-1, and RPTS.

All containers are little-endian.  The native grid container shares one
layout — magic, u16 version, u32 dims (nx, ny, nz), f32 spacing, then the
z-major voxel payload — and distinguishes payload type by magic:

* ``RVOL``: int16 HU volume
* ``RMSK``: uint8 binary mask
* ``RLBL``: uint16 instance labels

NIfTI-1 support is deliberately narrow: single-file ``.nii``/``.nii.gz``,
int16 or float32 data, axial-canonical orientation.  Anything else is
rejected explicitly rather than reinterpreted.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedFeatureError
from .volume import BinaryMask, LabelMap, Volume

__all__ = [
    "read_rvol",
    "write_rvol",
    "import_nifti",
    "export_nifti",
    "read_rpts",
    "write_rpts",
]

_GRID_MAGICS = {b"RVOL": "volume", b"RMSK": "mask", b"RLBL": "labels"}
_GRID_DTYPES = {"volume": "<i2", "mask": "u1", "labels": "<u2"}
_GRID_VERSION = 1


def _grid_kind(obj) -> str:
    if isinstance(obj, Volume):
        return "volume"
    if isinstance(obj, BinaryMask):
        return "mask"
    if isinstance(obj, LabelMap):
        return "labels"
    raise TypeError(f"cannot store {type(obj).__name__} in a grid container")


def write_rvol(obj: Volume | BinaryMask | LabelMap, path) -> None:
    """Write a grid object to its native container (magic by payload type)."""
    kind = _grid_kind(obj)
    magic = {v: k for k, v in _GRID_MAGICS.items()}[kind]
    nx, ny, nz = obj.dims
    header = magic + struct.pack("<H", _GRID_VERSION)
    header += struct.pack("<3I", nx, ny, nz)
    header += struct.pack("<3f", *obj.spacing)
    if kind == "volume":
        payload = obj.data.astype("<i2", copy=False)
    elif kind == "mask":
        payload = obj.bits.astype("u1", copy=False)
    else:
        if obj.labels.max(initial=0) > np.iinfo(np.uint16).max:
            raise ValueError("label ids exceed uint16 payload range")
        payload = obj.labels.astype("<u2", copy=False)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="C"))


def read_rvol(path) -> Volume | BinaryMask | LabelMap:
    """Read any member of the native grid container family."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24:
        raise FormatError("grid container truncated", offset=len(blob))
    magic = blob[:4]
    if magic not in _GRID_MAGICS:
        raise FormatError(f"bad grid container magic {magic!r}", offset=0)
    kind = _GRID_MAGICS[magic]
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _GRID_VERSION:
        raise UnsupportedFeatureError(f"unsupported container version {version}")
    nx, ny, nz = struct.unpack_from("<3I", blob, 6)
    spacing = struct.unpack_from("<3f", blob, 18)
    dtype = np.dtype(_GRID_DTYPES[kind])
    expected = 30 + nx * ny * nz * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"payload size mismatch: have {len(blob)} bytes, expected {expected}",
            offset=min(len(blob), expected))
    raw = np.frombuffer(blob, dtype=dtype, offset=30).reshape(nz, ny, nx)
    if kind == "volume":
        return Volume((nx, ny, nz), spacing, raw.astype(np.int16))
    if kind == "mask":
        return BinaryMask((nx, ny, nz), spacing, raw.astype(bool))
    return LabelMap((nx, ny, nz), spacing, raw.astype(np.int32))


# --- NIfTI-1 -----------------------------------------------------------

_NIFTI_HDR_SIZE = 348
_NIFTI_INT16 = 4
_NIFTI_FLOAT32 = 16


def _maybe_gzip_read(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as g:
                return g.read()
        return f.read()


def _require_canonical_orientation(hdr: bytes) -> None:
    qform_code, sform_code = struct.unpack_from("<2h", hdr, 252)
    if sform_code > 0:
        srow = np.array(struct.unpack_from("<12f", hdr, 280)).reshape(3, 4)
        rot = srow[:, :3]
        off_diag = rot - np.diag(np.diag(rot))
        if np.any(np.abs(off_diag) > 1e-5 * max(1.0, np.abs(rot).max())) \
                or np.any(np.diag(rot) <= 0):
            raise UnsupportedFeatureError(
                "non axial-canonical sform orientation is not supported")
    elif qform_code > 0:
        b, c, d = struct.unpack_from("<3f", hdr, 256)
        if abs(b) > 1e-5 or abs(c) > 1e-5 or abs(d) > 1e-5:
            raise UnsupportedFeatureError(
                "non axial-canonical qform orientation is not supported")


def import_nifti(path) -> Volume:
    """Read a single-file NIfTI-1 volume into the canonical grid layout."""
    blob = _maybe_gzip_read(path)
    if len(blob) < _NIFTI_HDR_SIZE:
        raise FormatError("NIfTI header truncated", offset=len(blob))
    hdr = blob[:_NIFTI_HDR_SIZE]
    magic = hdr[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"bad NIfTI magic {magic!r}", offset=344)
    if magic == b"ni1\x00":
        raise UnsupportedFeatureError("two-file NIfTI (.hdr/.img) is not supported")
    (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
    if sizeof_hdr != _NIFTI_HDR_SIZE:
        if struct.unpack_from(">i", hdr, 0)[0] == _NIFTI_HDR_SIZE:
            raise UnsupportedFeatureError("big-endian NIfTI is not supported")
        raise FormatError(f"bad sizeof_hdr {sizeof_hdr}", offset=0)

    dim = struct.unpack_from("<8h", hdr, 40)
    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        ndim = 3
    if ndim != 3:
        raise UnsupportedFeatureError(f"only 3-D volumes are supported, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) <= 0:
        raise FormatError(f"non-positive dims {(nx, ny, nz)}", offset=40)

    datatype, bitpix = struct.unpack_from("<2h", hdr, 70)
    if datatype == _NIFTI_INT16:
        dtype, expect_bits = np.dtype("<i2"), 16
    elif datatype == _NIFTI_FLOAT32:
        dtype, expect_bits = np.dtype("<f4"), 32
    else:
        raise UnsupportedFeatureError(f"unsupported NIfTI datatype code {datatype}")
    if bitpix != expect_bits:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}", offset=72)

    pixdim = struct.unpack_from("<8f", hdr, 76)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", hdr, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", hdr, 112)
    _require_canonical_orientation(hdr)

    offset = int(vox_offset) if vox_offset >= _NIFTI_HDR_SIZE else 352
    count = nx * ny * nz
    end = offset + count * dtype.itemsize
    if len(blob) < end:
        raise FormatError("NIfTI payload truncated", offset=len(blob))
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    # NIfTI stores x fastest, z slowest: already this package's z-major order.
    raw = raw.reshape(nz, ny, nx)

    values = raw.astype(np.float64)
    if scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0):
        values = values * scl_slope + scl_inter
    hu = np.rint(values)
    info = np.iinfo(np.int16)
    hu = np.clip(hu, info.min, info.max).astype(np.int16)
    return Volume((nx, ny, nz), spacing, hu)


def export_nifti(v: Volume, path) -> None:
    """Write a Volume as single-file NIfTI-1 (int16, canonical orientation)."""
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    nx, ny, nz = v.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_INT16, 16)
    sx, sy, sz = v.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    # sform: plain scaling affine, axial-canonical.
    struct.pack_into("<2h", hdr, 252, 0, 1)
    struct.pack_into("<12f", hdr, 280,
                     sx, 0.0, 0.0, 0.0,
                     0.0, sy, 0.0, 0.0,
                     0.0, 0.0, sz, 0.0)
    hdr[344:348] = b"n+1\x00"
    body = bytes(hdr) + b"\x00" * 4 + v.data.astype("<i2", copy=False).tobytes(order="C")
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(body)
    else:
        with open(path, "wb") as f:
            f.write(body)


# --- RPTS point sets ---------------------------------------------------

_RPTS_MAGIC = b"RPTS"
_RPTS_VERSION = 1


def write_rpts(coords: np.ndarray, labels: np.ndarray | None, path) -> None:
    """Write point coordinates (float32) and optional uint8 labels."""
    coords = np.asarray(coords, dtype="<f4")
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be (N, 3), got {coords.shape}")
    n = coords.shape[0]
    if labels is not None and len(labels) != n:
        raise ValueError("labels length must match point count")
    with open(path, "wb") as f:
        f.write(_RPTS_MAGIC)
        f.write(struct.pack("<H", _RPTS_VERSION))
        f.write(struct.pack("<Q", n))
        f.write(coords.tobytes(order="C"))
        if labels is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(np.asarray(labels, dtype="u1").tobytes(order="C"))


def read_rpts(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read an RPTS file; returns (coords float64 (N,3), labels or None)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14:
        raise FormatError("RPTS file truncated", offset=len(blob))
    if blob[:4] != _RPTS_MAGIC:
        raise FormatError(f"bad RPTS magic {blob[:4]!r}", offset=0)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _RPTS_VERSION:
        raise UnsupportedFeatureError(f"unsupported RPTS version {version}")
    (n,) = struct.unpack_from("<Q", blob, 6)
    coords_end = 14 + 12 * n
    if len(blob) < coords_end + 1:
        raise FormatError("RPTS payload truncated", offset=len(blob))
    coords = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=14)
    coords = coords.reshape(n, 3).astype(np.float64)
    has_labels = blob[coords_end]
    labels = None
    if has_labels == 1:
        if len(blob) < coords_end + 1 + n:
            raise FormatError("RPTS labels truncated", offset=len(blob))
        labels = np.frombuffer(blob, dtype="u1", count=n, offset=coords_end + 1).copy()
    elif has_labels != 0:
        raise FormatError(f"bad RPTS label flag {has_labels}", offset=coords_end)
    return coords, labels
