"""Checkpoint binary format: byte-exact round trips and corruption handling."""

import numpy as np
import pytest

from rwpcl.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from rwpcl.errors import InputError
from rwpcl.numcore import Tensor


def _payload():
    rng = np.random.default_rng(0)
    return {
        "classifier.weight": rng.standard_normal((4, 2)).astype(np.float32),
        "classifier.bias": np.zeros(2, dtype=np.float32),
        "embed.token": Tensor(rng.standard_normal((5, 4)).astype(np.float32)),
        "scalar.like": np.float32(3.5) * np.ones((), dtype=np.float32),
    }


def test_round_trip_preserves_values(tmp_path):
    path = tmp_path / "model.rwpc"
    tensors = _payload()
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert sorted(loaded) == sorted(tensors)
    for name, value in tensors.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        assert np.array_equal(loaded[name], data)
        assert loaded[name].dtype == np.float32


def test_round_trip_is_byte_exact(tmp_path):
    first = tmp_path / "a.rwpc"
    second = tmp_path / "b.rwpc"
    save_checkpoint(first, _payload())
    save_checkpoint(second, load_checkpoint(first))
    assert first.read_bytes() == second.read_bytes()


def test_file_starts_with_magic(tmp_path):
    path = tmp_path / "m.rwpc"
    save_checkpoint(path, _payload())
    assert path.read_bytes()[:4] == MAGIC


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.rwpc"
    save_checkpoint(path, _payload())
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(InputError, match="magic"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.rwpc"
    save_checkpoint(path, _payload())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "g.rwpc"
    save_checkpoint(path, _payload())
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(InputError, match="trailing"):
        load_checkpoint(path)


def test_missing_file():
    with pytest.raises(InputError, match="not found"):
        load_checkpoint("/nonexistent/x.rwpc")
