"""Checkpoint file format: write-then-read oracle, byte determinism,
hand-built blobs, corruption detection."""

import struct

import numpy as np
import pytest

from pillarfuse.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from pillarfuse.errors import FormatError


def sample_state(rng):
    return {
        "head.weight": rng.normal(size=(4, 3)),
        "head.bias": rng.normal(size=(4,)),
        "scalar": np.array(2.5),
        "bn.running_var": rng.uniform(0.5, 2.0, size=(7,)),
    }


def test_round_trip_preserves_names_shapes_values(tmp_path):
    state = sample_state(np.random.default_rng(0))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(state)
    for name in state:
        assert loaded[name].shape == np.asarray(state[name]).shape
        np.testing.assert_array_equal(loaded[name], state[name])


def test_identical_states_produce_identical_bytes(tmp_path):
    rng = np.random.default_rng(1)
    state = sample_state(rng)
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, state)
    # same values via a differently ordered dict
    save_checkpoint(b, dict(reversed(list(state.items()))))
    assert a.read_bytes() == b.read_bytes()


def test_file_layout_matches_spec_bytes(tmp_path):
    path = tmp_path / "one.ckpt"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
    blob = path.read_bytes()
    expected = (MAGIC + struct.pack("<I", 1)
                + struct.pack("<H", 1) + b"w"
                + struct.pack("<B", 2) + struct.pack("<2I", 1, 2)
                + np.array([1.0, 2.0]).astype("<f8").tobytes())
    assert blob == expected


def test_hand_built_blob_loads(tmp_path):
    blob = (MAGIC + struct.pack("<I", 1)
            + struct.pack("<H", 4) + b"bias"
            + struct.pack("<B", 1) + struct.pack("<I", 3)
            + np.array([0.5, -1.5, 9.0]).astype("<f8").tobytes())
    path = tmp_path / "hand.ckpt"
    path.write_bytes(blob)
    state = load_checkpoint(path)
    np.testing.assert_array_equal(state["bias"], [0.5, -1.5, 9.0])


def test_zero_dim_array_round_trips(tmp_path):
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, {"x": np.array(7.25)})
    loaded = load_checkpoint(path)
    assert loaded["x"].shape == ()
    assert float(loaded["x"]) == 7.25


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(FormatError, match="not a parameter checkpoint"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"w": np.ones(2)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_duplicate_entry_rejected(tmp_path):
    entry = (struct.pack("<H", 1) + b"w" + struct.pack("<B", 1)
             + struct.pack("<I", 1) + np.array([1.0]).astype("<f8").tobytes())
    path = tmp_path / "dup.ckpt"
    path.write_bytes(MAGIC + struct.pack("<I", 2) + entry + entry)
    with pytest.raises(FormatError, match="duplicate"):
        load_checkpoint(path)


def test_randomized_round_trips(tmp_path):
    rng = np.random.default_rng(2)
    for trial in range(10):
        count = int(rng.integers(1, 6))
        state = {}
        for i in range(count):
            ndim = int(rng.integers(0, 4))
            shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
            state[f"p{trial}.{i}"] = rng.normal(size=shape)
        path = tmp_path / f"trial{trial}.ckpt"
        save_checkpoint(path, state)
        loaded = load_checkpoint(path)
        for name, arr in state.items():
            np.testing.assert_array_equal(loaded[name], arr)
