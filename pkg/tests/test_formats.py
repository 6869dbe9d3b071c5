"""Tensor/checkpoint container round-trips and byte-level layout."""

import struct

import numpy as np
import pytest

from lsr.errors import ShapeError
from lsr.formats import (read_checkpoint, read_tensor, sidecar_path,
                         write_checkpoint, write_tensor)


class TestTensorFile:
    def test_float_roundtrip(self, tmp_path):
        arr = np.linspace(-3, 3, 24, dtype=np.float32).reshape(2, 3, 4)
        path = tmp_path / "t.lsrt"
        write_tensor(path, arr)
        out = read_tensor(path)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, arr)

    def test_int_and_bool_coerce_to_int32(self, tmp_path):
        path = tmp_path / "t.lsrt"
        write_tensor(path, np.array([[True, False], [False, True]]))
        out = read_tensor(path)
        assert out.dtype == np.int32
        np.testing.assert_array_equal(out, [[1, 0], [0, 1]])

    def test_float64_is_stored_as_float32(self, tmp_path):
        path = tmp_path / "t.lsrt"
        write_tensor(path, np.array([0.1], dtype=np.float64))
        assert read_tensor(path).dtype == np.float32

    def test_exact_byte_layout(self, tmp_path):
        # Independently assembled reference bytes for a 2x2 int32 tensor.
        arr = np.array([[1, 2], [3, 4]], dtype=np.int32)
        expected = (b"LSRT" + struct.pack("<I", 1) + struct.pack("<BB", 1, 2)
                    + struct.pack("<II", 2, 2)
                    + struct.pack("<iiii", 1, 2, 3, 4))
        path = tmp_path / "t.lsrt"
        write_tensor(path, arr)
        assert path.read_bytes() == expected

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.lsrt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ShapeError, match="magic"):
            read_tensor(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "t.lsrt"
        write_tensor(path, np.zeros(3, dtype=np.float32))
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(ShapeError, match="version"):
            read_tensor(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.lsrt"
        write_tensor(path, np.zeros(3, dtype=np.float32))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ShapeError, match="trailing"):
            read_tensor(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.lsrt"
        write_tensor(path, np.zeros(8, dtype=np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(ShapeError, match="truncated"):
            read_tensor(path)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(ShapeError, match="dtype"):
            write_tensor(tmp_path / "t.lsrt",
                         np.array([1 + 2j], dtype=np.complex64))

    def test_optional_sidecar(self, tmp_path):
        path = tmp_path / "t.lsrt"
        write_tensor(path, np.zeros(2), {"kind": "slice", "id": 7})
        assert sidecar_path(path).exists()
        write_tensor(tmp_path / "bare.lsrt", np.zeros(2))
        assert not sidecar_path(tmp_path / "bare.lsrt").exists()


class TestCheckpointFile:
    def test_roundtrip_preserves_names_shapes_values(self, tmp_path):
        tensors = {
            "model.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
            "model.bias": np.array([-1.5], dtype=np.float32),
            "adam.m.model.weight": np.zeros((2, 3), dtype=np.float32),
            "counts": np.array([3, 1, 4], dtype=np.int32),
        }
        meta = {"kind": "checkpoint", "stage": "vqvae", "step": 12}
        path = tmp_path / "c.lsrc"
        write_checkpoint(path, tensors, meta)
        out, sidecar = read_checkpoint(path)
        assert sidecar == meta
        assert set(out) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(out[name], tensors[name])

    def test_header_layout(self, tmp_path):
        path = tmp_path / "c.lsrc"
        write_checkpoint(path, {"w": np.zeros(1, dtype=np.float32)}, {})
        data = path.read_bytes()
        assert data[:4] == b"LSRC"
        version, count = struct.unpack_from("<II", data, 4)
        assert (version, count) == (1, 1)
        (name_len,) = struct.unpack_from("<H", data, 12)
        assert data[14:14 + name_len] == b"w"

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "c.lsrc"
        write_tensor(path, np.zeros(2))   # LSRT magic, not LSRC
        with pytest.raises(ShapeError, match="magic"):
            read_checkpoint(path)

    def test_missing_sidecar_yields_empty_meta(self, tmp_path):
        path = tmp_path / "c.lsrc"
        write_checkpoint(path, {"w": np.zeros(1)}, {"step": 1})
        sidecar_path(path).unlink()
        _, meta = read_checkpoint(path)
        assert meta == {}

    def test_scalar_tensor_roundtrip(self, tmp_path):
        path = tmp_path / "c.lsrc"
        write_checkpoint(path, {"step": np.asarray(41, dtype=np.int32)}, {})
        out, _ = read_checkpoint(path)
        assert out["step"].shape == ()
        assert int(out["step"]) == 41
