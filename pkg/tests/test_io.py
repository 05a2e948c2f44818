import gzip
import struct

import numpy as np
import pytest

from conftest import make_volume, random_mask
from ribpoint import io
from ribpoint.errors import FormatError, UnsupportedFeatureError
from ribpoint.volume import LabelMap


def ramp_volume(dims=(8, 8, 4), spacing=(1.0, 1.0, 1.0)):
    nx, ny, nz = dims
    ramp = (np.arange(nx * ny * nz, dtype=np.int16) % 3001) - 1000
    return make_volume(ramp.reshape(nz, ny, nx), spacing)


# --- native grid container -------------------------------------------------

def test_rvol_round_trip_bit_exact(tmp_path):
    v = ramp_volume(spacing=(0.7, 1.2, 2.5))
    p = tmp_path / "v.rvol"
    io.write_rvol(v, p)
    back = io.read_rvol(p)
    assert back.dims == v.dims
    assert np.allclose(back.spacing, v.spacing, atol=1e-7)
    assert np.array_equal(back.data, v.data)
    # byte-identical on rewrite
    p2 = tmp_path / "v2.rvol"
    io.write_rvol(back, p2)
    assert p.read_bytes()[18:30] == p2.read_bytes()[18:30]  # spacing floats
    assert p.read_bytes()[30:] == p2.read_bytes()[30:]


def test_rvol_layout_matches_declared_format(tmp_path):
    v = ramp_volume(dims=(3, 2, 2))
    p = tmp_path / "v.rvol"
    io.write_rvol(v, p)
    blob = p.read_bytes()
    assert blob[:4] == b"RVOL"
    assert struct.unpack_from("<H", blob, 4)[0] == 1
    assert struct.unpack_from("<3I", blob, 6) == (3, 2, 2)
    payload = np.frombuffer(blob, dtype="<i2", offset=30)
    assert np.array_equal(payload, v.data.ravel())  # z-major order


def test_mask_and_labels_round_trip(tmp_path):
    m = random_mask((5, 6, 7), 0.4, seed=2)
    io.write_rvol(m, tmp_path / "m.rvol")
    back = io.read_rvol(tmp_path / "m.rvol")
    assert np.array_equal(back.bits, m.bits)

    labels = np.zeros((4, 4, 4), dtype=np.int32)
    labels[0, 0, :3] = [1, 1, 2]
    lm = LabelMap((4, 4, 4), (1, 1, 1), labels)
    io.write_rvol(lm, tmp_path / "l.rvol")
    back = io.read_rvol(tmp_path / "l.rvol")
    assert isinstance(back, LabelMap)
    assert np.array_equal(back.labels, labels)


def test_rvol_bad_magic(tmp_path):
    p = tmp_path / "bad.rvol"
    p.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(FormatError):
        io.read_rvol(p)


def test_rvol_truncated_payload(tmp_path):
    v = ramp_volume(dims=(4, 4, 4))
    p = tmp_path / "v.rvol"
    io.write_rvol(v, p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(FormatError):
        io.read_rvol(p)


# --- NIfTI -----------------------------------------------------------------

def test_nifti_round_trip_through_own_writer(tmp_path):
    # fixture: known ramp pattern, written by the project's writer
    v = ramp_volume(dims=(8, 8, 4), spacing=(1.0, 1.0, 1.0))
    p = tmp_path / "v.nii"
    io.export_nifti(v, p)
    back = io.import_nifti(p)
    assert back.dims == (8, 8, 4)
    assert np.allclose(back.spacing, (1, 1, 1))
    assert np.array_equal(back.data, v.data)


def test_nifti_gzip_round_trip(tmp_path):
    v = ramp_volume(dims=(5, 4, 3), spacing=(0.5, 0.75, 2.0))
    p = tmp_path / "v.nii.gz"
    io.export_nifti(v, p)
    back = io.import_nifti(p)
    assert np.array_equal(back.data, v.data)
    assert np.allclose(back.spacing, v.spacing, atol=1e-6)


def test_nifti_bad_magic_is_format_error(tmp_path):
    v = ramp_volume(dims=(4, 4, 2))
    p = tmp_path / "v.nii"
    io.export_nifti(v, p)
    blob = bytearray(p.read_bytes())
    blob[344:348] = b"XXXX"
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as err:
        io.import_nifti(p)
    assert err.value.offset == 344


def test_nifti_unsupported_datatype(tmp_path):
    v = ramp_volume(dims=(4, 4, 2))
    p = tmp_path / "v.nii"
    io.export_nifti(v, p)
    blob = bytearray(p.read_bytes())
    struct.pack_into("<2h", blob, 70, 2, 8)  # uint8: not supported
    p.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedFeatureError):
        io.import_nifti(p)


def test_nifti_float32_with_scaling(tmp_path):
    # hand-built float32 file with scl_slope/scl_inter set
    nx, ny, nz = 3, 2, 2
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # float32
    struct.pack_into("<8f", hdr, 76, 1.0, 2.0, 2.0, 2.0, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 2.0, 100.0)  # slope, inter
    hdr[344:348] = b"n+1\x00"
    values = np.arange(nx * ny * nz, dtype="<f4")
    blob = bytes(hdr) + b"\x00" * 4 + values.tobytes()
    p = tmp_path / "scaled.nii"
    p.write_bytes(blob)
    v = io.import_nifti(p)
    want = np.rint(values.astype(np.float64) * 2.0 + 100.0).astype(np.int16)
    assert np.array_equal(v.data.ravel(), want)
    assert v.spacing == (2.0, 2.0, 2.0)


def test_nifti_non_canonical_orientation_rejected(tmp_path):
    v = ramp_volume(dims=(4, 4, 2))
    p = tmp_path / "v.nii"
    io.export_nifti(v, p)
    blob = bytearray(p.read_bytes())
    # sform with a 90-degree rotation: srow_x points along +y
    struct.pack_into("<12f", blob, 280,
                     0.0, 1.0, 0.0, 0.0,
                     -1.0, 0.0, 0.0, 0.0,
                     0.0, 0.0, 1.0, 0.0)
    p.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedFeatureError):
        io.import_nifti(p)


def test_nifti_truncated_header(tmp_path):
    p = tmp_path / "short.nii"
    p.write_bytes(b"\x00" * 100)
    with pytest.raises(FormatError):
        io.import_nifti(p)


# --- RPTS ------------------------------------------------------------------

def test_rpts_round_trip(tmp_path):
    g = np.random.default_rng(4)
    coords = g.random((100, 3)) * 50
    labels = g.integers(0, 2, 100).astype(np.uint8)
    p = tmp_path / "p.rpts"
    io.write_rpts(coords, labels, p)
    back_coords, back_labels = io.read_rpts(p)
    assert np.array_equal(back_coords, coords.astype(np.float32).astype(np.float64))
    assert np.array_equal(back_labels, labels)


def test_rpts_no_labels(tmp_path):
    coords = np.zeros((3, 3))
    p = tmp_path / "p.rpts"
    io.write_rpts(coords, None, p)
    back_coords, back_labels = io.read_rpts(p)
    assert back_labels is None
    assert back_coords.shape == (3, 3)


def test_rpts_bad_magic(tmp_path):
    p = tmp_path / "bad.rpts"
    p.write_bytes(b"XPTS" + b"\x00" * 20)
    with pytest.raises(FormatError):
        io.read_rpts(p)
