"""
Tests for the binary checkpoint container
"""

import struct

import numpy as np
import pytest

from modules.checkpoint import MAGIC, Checkpoint, decode_records, encode_records, read_checkpoint
from modules.error_handler import CheckpointError
from modules.tensor import AdamState


def test_save_load_preserves_names_shapes_and_bits(tmp_path, rng):
    tensors = {
        "vision.stem.weight": rng.normal(size=(27, 3, 4)).astype(np.float32),
        "audio.out.bias": rng.normal(size=(2,)),
        "config.audio.depth": np.asarray(6.0),
    }
    path = tmp_path / "model.p2sc"
    Checkpoint(tensors).save(path)
    loaded = Checkpoint.load(path)

    assert set(loaded.tensors) == set(tensors)
    for name, value in tensors.items():
        assert loaded.tensors[name].dtype == value.dtype
        assert loaded.tensors[name].shape == value.shape
        assert loaded.tensors[name].tobytes() == value.tobytes()
    assert loaded.adam is None


def test_adam_state_survives_round_trip(tmp_path):
    adam = AdamState(lr=3e-3, beta2=0.99, eps=1e-6, step=7)
    adam.m["audio.w"] = np.full((2, 3), 0.5, dtype=np.float32)
    adam.v["audio.w"] = np.full((2, 3), 0.25, dtype=np.float32)
    path = tmp_path / "with_adam.p2sc"
    Checkpoint({"audio.w": np.zeros((2, 3), dtype=np.float32)}, adam).save(path)

    loaded = Checkpoint.load(path)
    assert loaded.adam is not None
    assert loaded.adam.step == 7
    assert (loaded.adam.lr, loaded.adam.beta1, loaded.adam.beta2, loaded.adam.eps) == (3e-3, 0.9, 0.99, 1e-6)
    np.testing.assert_array_equal(loaded.adam.m["audio.w"], adam.m["audio.w"])
    np.testing.assert_array_equal(loaded.adam.v["audio.w"], adam.v["audio.w"])
    assert set(loaded.tensors) == {"audio.w"}


def test_header_layout():
    payload = encode_records({"a": np.zeros(3, dtype=np.float32)})
    assert payload[:4] == MAGIC
    version, count = struct.unpack_from("<II", payload, 4)
    assert (version, count) == (1, 1)


def test_bad_magic_is_rejected():
    with pytest.raises(CheckpointError):
        decode_records(b"NOPE" + b"\x00" * 16)


def test_truncated_payload_is_rejected():
    payload = encode_records({"a": np.ones((4, 4), dtype=np.float64)})
    with pytest.raises(CheckpointError):
        decode_records(payload[:-8])


def test_integer_arrays_are_rejected():
    with pytest.raises(CheckpointError):
        encode_records({"a": np.arange(3)})


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "absent.p2sc")


def test_adam_hyperparameters_default_when_absent():
    records = {"audio.w": np.zeros(2, dtype=np.float32), "adam.step": np.asarray(3.0)}
    adam = Checkpoint.from_records(records).adam
    assert adam.step == 3
    assert adam.lr == AdamState().lr
