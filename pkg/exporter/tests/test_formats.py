"""Wire-format pinning: blob bytes and pose conversion."""

import struct

import numpy as np
import pytest

from bundle_exporter.formats import camera_to_world, flat12, write_blob


def test_blob_wire_layout_is_pinned(tmp_path):
    # Hand-assembled expected bytes: magic, rank, dims, little-endian f32.
    arr = np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)
    path = tmp_path / "x.f32"
    write_blob(path, arr)
    expected = (
        b"L3BL"
        + b"\x02\x00\x00\x00"                  # rank 2
        + b"\x02\x00\x00\x00\x02\x00\x00\x00"  # dims 2 x 2
        + b"\x00\x00\xc0\x3f"                  # 1.5
        + b"\x00\x00\x00\xc0"                  # -2.0
        + b"\x00\x00\x80\x3e"                  # 0.25
        + b"\x00\x00\x40\x40"                  # 3.0
    )
    assert path.read_bytes() == expected


def test_blob_rank3_header_and_payload(tmp_path):
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    path = tmp_path / "y.f32"
    write_blob(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"L3BL"
    (rank,) = struct.unpack_from("<I", raw, 4)
    assert rank == 3
    assert struct.unpack_from("<3I", raw, 8) == (2, 3, 4)
    payload = np.frombuffer(raw, dtype="<f4", offset=8 + 4 * rank)
    np.testing.assert_array_equal(payload, np.arange(24, dtype=np.float32))
    assert len(raw) == 8 + 4 * rank + 4 * 24


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_camera_to_world_inverts_world_to_camera():
    rng = np.random.default_rng(5)
    for _ in range(50):
        rotation = _random_rotation(rng)
        translation = rng.uniform(-4.0, 4.0, size=3)
        pose = camera_to_world(rotation, translation)
        points_world = rng.uniform(-10.0, 10.0, size=(20, 3))
        points_cam = points_world @ rotation.T + translation
        back = points_cam @ pose[:, :3].T + pose[:, 3]
        np.testing.assert_allclose(back, points_world, atol=1e-10)


def test_camera_to_world_center_is_camera_position():
    rng = np.random.default_rng(6)
    rotation = _random_rotation(rng)
    eye = rng.uniform(-3.0, 3.0, size=3)
    translation = -rotation @ eye
    pose = camera_to_world(rotation, translation)
    np.testing.assert_allclose(pose[:, 3], eye, atol=1e-12)
    np.testing.assert_allclose(pose[:, :3], rotation.T, atol=1e-15)


def test_flat12_is_row_major():
    m = np.arange(12, dtype=np.float64).reshape(3, 4)
    assert flat12(m) == [float(v) for v in range(12)]


def test_flat12_rejects_wrong_shape():
    with pytest.raises(ValueError):
        flat12(np.zeros((4, 3)))
