import numpy as np
import pytest

from protofuse.persistence import (
    MAGIC,
    ChecksumMismatch,
    VersionMismatch,
    export_image,
    file_hash,
    import_image,
    load_tensors,
    save_tensors,
    to_uint8,
)


def _tensors():
    rng = np.random.default_rng(0)
    return {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
    }


def test_round_trip_bit_exact(tmp_path):
    path = tmp_path / "t.vsck"
    tensors = _tensors()
    save_tensors(tensors, path, meta={"kind": "test"})
    loaded, meta = load_tensors(path)
    assert meta == {"kind": "test"}
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].tobytes() == np.ascontiguousarray(tensors[k]).tobytes()
        assert loaded[k].shape == tensors[k].shape


def test_save_is_deterministic(tmp_path):
    a, b = tmp_path / "a.vsck", tmp_path / "b.vsck"
    save_tensors(_tensors(), a, meta={"x": 1})
    save_tensors(_tensors(), b, meta={"x": 1})
    assert file_hash(a) == file_hash(b)


def test_truncated_file_checksum(tmp_path):
    path = tmp_path / "t.vsck"
    save_tensors(_tensors(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(ChecksumMismatch):
        load_tensors(path)


def test_corrupted_payload_checksum(tmp_path):
    path = tmp_path / "t.vsck"
    save_tensors(_tensors(), path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        load_tensors(path)


def test_version_mismatch(tmp_path):
    import hashlib
    import struct

    path = tmp_path / "t.vsck"
    save_tensors(_tensors(), path)
    blob = bytearray(path.read_bytes()[:-8])
    version, = struct.unpack_from("<I", blob, 4)
    struct.pack_into("<I", blob, 4, version + 1)
    blob += hashlib.sha256(bytes(blob)).digest()[:8]
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        load_tensors(path)


def test_not_a_container(tmp_path):
    path = tmp_path / "t.vsck"
    path.write_bytes(b"nope" + b"\x00" * 40)
    with pytest.raises(VersionMismatch):
        load_tensors(path)


def test_atomic_write_leaves_no_temp(tmp_path):
    path = tmp_path / "t.vsck"
    save_tensors(_tensors(), path)
    assert [p.name for p in tmp_path.iterdir()] == ["t.vsck"]


def test_to_uint8_endpoints():
    assert (to_uint8(np.full((3, 4, 4), -1.0)) == 0).all()
    assert (to_uint8(np.full((3, 4, 4), 1.0)) == 255).all()
    assert (to_uint8(np.zeros((3, 2, 2))) == 128).all()


@pytest.mark.parametrize("fmt", ["ppm", "png"])
def test_export_import_quantization(tmp_path, fmt):
    rng = np.random.default_rng(1)
    img = rng.uniform(-1, 1, (3, 32, 32)).astype(np.float32)
    path = tmp_path / f"img.{fmt}"
    export_image(img, path)
    back = import_image(path)
    assert np.abs(back - img).max() <= (1.0 / 255.0) * 2.0  # one 8-bit step of range


def test_export_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        export_image(np.zeros((3, 2, 2)), tmp_path / "x.bmp")
