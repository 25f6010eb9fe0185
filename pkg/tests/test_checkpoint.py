import struct

import numpy as np
import pytest

from litevae.checkpoint import (
    MAGIC,
    BadMagicError,
    Checkpoint,
    CheckpointError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    VersionError,
    convert_precision,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    validate_shapes,
)


@pytest.fixture
def ckpt(rng):
    return Checkpoint(
        step=17,
        config={"lr": 1e-4, "name": "tiny"},
        tensors={
            "model.w": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
            "model.b": rng.standard_normal(3),
            "opt.step": np.asarray(5.0),
        },
    )


class TestFormat:
    def test_header_layout(self, ckpt):
        data = encode_checkpoint(ckpt)
        assert data[:4] == MAGIC
        assert struct.unpack("<IQ", data[4:16]) == (1, 17)
        (n,) = struct.unpack("<I", data[16:20])
        assert data[20:20 + n] == b'{"lr": 0.0001, "name": "tiny"}'
        assert struct.unpack("<I", data[20 + n:24 + n]) == (3,)

    def test_tensor_record(self):
        data = encode_checkpoint(Checkpoint(0, {}, {"ab": np.array([[1.0, 2.0]], dtype=np.float32)}))
        rec = data[4 + 12 + 4 + 2 + 4:]
        assert rec[:4] == b"\x02\x00ab"
        assert rec[4:6] == bytes([0, 2])
        assert struct.unpack("<2Q", rec[6:22]) == (1, 2)
        assert np.frombuffer(rec[22:], "<f4").tolist() == [1.0, 2.0]

    def test_round_trip_bit_exact(self, ckpt):
        out = decode_checkpoint(encode_checkpoint(ckpt))
        assert out.step == 17 and out.config == ckpt.config
        assert list(out.tensors) == list(ckpt.tensors)
        for k, v in ckpt.tensors.items():
            assert out.tensors[k].dtype == v.dtype
            assert out.tensors[k].tobytes() == v.tobytes()

    def test_special_values_preserved(self):
        arr = np.array([np.nan, -0.0, np.inf, 1e-45], dtype=np.float32)
        out = decode_checkpoint(encode_checkpoint(Checkpoint(0, {}, {"x": arr})))
        assert out.tensors["x"].tobytes() == arr.tobytes()

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            encode_checkpoint(Checkpoint(0, {}, {"x": np.arange(3)}))

    def test_section(self, ckpt):
        assert sorted(ckpt.section("model")) == ["b", "w"]


class TestErrors:
    def test_bad_magic(self, ckpt):
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"XXXX" + encode_checkpoint(ckpt)[4:])

    def test_bad_version(self, ckpt):
        data = bytearray(encode_checkpoint(ckpt))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError):
            decode_checkpoint(bytes(data))

    @pytest.mark.parametrize("cut", [3, 10, 30, -1, -100])
    def test_truncated(self, ckpt, cut):
        data = encode_checkpoint(ckpt)
        with pytest.raises(TruncatedCheckpointError):
            decode_checkpoint(data[:cut])

    def test_trailing_bytes(self, ckpt):
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(ckpt) + b"\0")

    def test_shape_mismatch(self, ckpt):
        with pytest.raises(ShapeMismatchError):
            validate_shapes(ckpt, {"w": (3, 2, 3, 3), "b": (4,)})

    def test_missing_tensor(self, ckpt):
        with pytest.raises(ShapeMismatchError):
            validate_shapes(ckpt, {"w": (3, 2, 3, 3)})

    def test_shapes_ok(self, ckpt):
        validate_shapes(ckpt, {"w": (3, 2, 3, 3), "b": (3,)})


class TestFiles:
    def test_save_load(self, ckpt, tmp_path):
        path = tmp_path / "a.lvae"
        save_checkpoint(path, ckpt)
        out = load_checkpoint(path)
        assert all(out.tensors[k].tobytes() == v.tobytes() for k, v in ckpt.tensors.items())

    def test_atomic_no_temp_left(self, ckpt, tmp_path):
        save_checkpoint(tmp_path / "a.lvae", ckpt)
        save_checkpoint(tmp_path / "a.lvae", ckpt)
        assert [p.name for p in tmp_path.iterdir()] == ["a.lvae"]


class TestPrecision:
    def test_f64_to_f32_rounds_to_nearest(self):
        x = np.array([1.0 + 2.0**-24 + 2.0**-30, 0.1])
        out = convert_precision({"x": x}, np.float32)["x"]
        assert out.dtype == np.float32
        assert out[0] == np.float32(1.0 + 2.0**-23)
        assert out[1] == np.float32(0.1)

    def test_f32_to_f64_exact(self, rng):
        x = rng.standard_normal(5).astype(np.float32)
        np.testing.assert_array_equal(convert_precision({"x": x}, np.float64)["x"], x.astype(np.float64))
