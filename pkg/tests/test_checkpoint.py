"""Binary checkpoint format: roundtrips and every structured failure mode."""

import struct

import numpy as np
import pytest

from msn import checkpoint as C


def sample_tensors(rng):
    return {
        "block1.conv1.kernel": rng.standard_normal((3, 3, 2, 4)).astype(np.float32),
        "block1.conv1.bias": rng.standard_normal(4).astype(np.float32),
        "xi.head1.state": rng.random(5),
        "meta.iteration": np.array([42.0]),
    }


def test_roundtrip_is_bit_identical(tmp_path, rng):
    tensors = sample_tensors(rng)
    path = tmp_path / "a.ckpt"
    C.write_tensors(path, tensors)
    loaded = C.read_tensors(path)
    assert sorted(loaded) == sorted(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_magic_and_version_fields(tmp_path, rng):
    path = tmp_path / "a.ckpt"
    C.write_tensors(path, sample_tensors(rng))
    raw = path.read_bytes()
    assert raw[:4] == b"MSN1"
    assert struct.unpack("<H", raw[4:6])[0] == C.VERSION


def test_bad_magic(tmp_path, rng):
    path = tmp_path / "a.ckpt"
    C.write_tensors(path, sample_tensors(rng))
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(C.BadMagicError):
        C.read_tensors(path)


def test_version_mismatch(tmp_path, rng):
    path = tmp_path / "a.ckpt"
    C.write_tensors(path, sample_tensors(rng))
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", C.VERSION + 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(C.VersionMismatchError):
        C.read_tensors(path)


def test_truncation(tmp_path, rng):
    path = tmp_path / "a.ckpt"
    C.write_tensors(path, sample_tensors(rng))
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(C.TruncatedError):
        C.read_tensors(path)


def test_trailing_bytes(tmp_path, rng):
    path = tmp_path / "a.ckpt"
    C.write_tensors(path, sample_tensors(rng))
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(C.CheckpointError):
        C.read_tensors(path)


def encode_tensor(name, arr):
    out = struct.pack("<H", len(name)) + name.encode()
    out += struct.pack("<BB", 1 if arr.dtype == np.float64 else 0, arr.ndim)
    for e in arr.shape:
        out += struct.pack("<I", e)
    return out + arr.tobytes()


def test_duplicate_tensor_name(tmp_path):
    arr = np.arange(3, dtype=np.float64)
    raw = C.MAGIC + struct.pack("<H", C.VERSION) + struct.pack("<I", 2)
    raw += encode_tensor("x", arr) + encode_tensor("x", arr)
    path = tmp_path / "dup.ckpt"
    path.write_bytes(raw)
    with pytest.raises(C.DuplicateTensorError):
        C.read_tensors(path)


def test_write_rejects_unsupported(tmp_path):
    with pytest.raises(ValueError):
        C.write_tensors(tmp_path / "x.ckpt", {"a": np.zeros(3, dtype=np.int32)})
    with pytest.raises(ValueError):
        C.write_tensors(tmp_path / "y.ckpt", {"a": np.zeros((1, 1, 1, 1, 1))})
