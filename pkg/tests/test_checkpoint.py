import struct
from collections import OrderedDict

import numpy as np
import pytest

from checkpoint import MAGIC, CheckpointKeeper, load_checkpoint, read_fingerprint, save_checkpoint
from errors import CompatibilityError, DataError, StorageError
from layers import Model
from optimizer import AdamState

FP = "a" * 64


def _arrays(rng):
    return OrderedDict(
        [
            ("dense.W", rng.normal(size=(3, 4)).astype(np.float32)),
            ("dense.b", rng.normal(size=4)),
            ("buffer.counts", np.arange(5, dtype=np.int64)),
            ("buffer.flags", np.array([0, 1, 255], dtype=np.uint8)),
            ("scalar", np.asarray(2.5)),
        ]
    )


def test_round_trip_is_bitwise(tmp_path, rng):
    arrays = _arrays(rng)
    state = AdamState(lr=5e-4, step=17, base_lr=1e-3)
    state.m["dense.W"] = rng.normal(size=(3, 4)).astype(np.float32)
    state.v["dense.W"] = rng.uniform(size=(3, 4)).astype(np.float32)
    path = save_checkpoint(tmp_path / "sub" / "model.ckpt", FP, arrays, state)

    loaded = load_checkpoint(path, FP)
    assert loaded.fingerprint == FP
    assert list(loaded.arrays) == list(arrays)
    for name, value in arrays.items():
        assert loaded.arrays[name].dtype == value.dtype
        assert loaded.arrays[name].tobytes() == value.tobytes()

    restored = loaded.adam_state(beta1=0.8)
    assert restored.step == 17 and restored.lr == 5e-4 and restored.base_lr == 1e-3
    assert restored.beta1 == 0.8
    np.testing.assert_array_equal(restored.m["dense.W"], state.m["dense.W"])
    np.testing.assert_array_equal(restored.v["dense.W"], state.v["dense.W"])


def test_without_optimizer(tmp_path, rng):
    path = save_checkpoint(tmp_path / "m.ckpt", FP, _arrays(rng))
    assert load_checkpoint(path).adam_state() is None


def test_file_starts_with_magic(tmp_path, rng):
    path = save_checkpoint(tmp_path / "m.ckpt", FP, _arrays(rng))
    head = path.read_bytes()[: len(MAGIC) + 4]
    assert head[: len(MAGIC)] == b"MTEVC"
    assert struct.unpack("<HH", head[len(MAGIC) :]) == (1, 64)


def test_fingerprint_mismatch(tmp_path, rng):
    path = save_checkpoint(tmp_path / "m.ckpt", FP, _arrays(rng))
    assert read_fingerprint(path) == FP
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, "b" * 64)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACHECKPOINT")
    with pytest.raises(DataError):
        load_checkpoint(path)
    with pytest.raises(DataError):
        read_fingerprint(path)


def test_truncated(tmp_path, rng):
    path = save_checkpoint(tmp_path / "m.ckpt", FP, _arrays(rng))
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)


def test_wrong_version(tmp_path, rng):
    path = save_checkpoint(tmp_path / "m.ckpt", FP, _arrays(rng))
    data = bytearray(path.read_bytes())
    data[len(MAGIC) : len(MAGIC) + 2] = struct.pack("<H", 9)
    path.write_bytes(bytes(data))
    with pytest.raises(CompatibilityError, match="version 9"):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(StorageError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(DataError, match="dtype"):
        save_checkpoint(tmp_path / "m.ckpt", FP, {"flags": np.array([True, False])})


def test_keeper_rotates(tmp_path, rng):
    keeper = CheckpointKeeper(tmp_path, "conversion_ppg", keep_last=2)
    assert keeper.latest() is None
    for step in (5, 10, 15, 20):
        keeper.save(step, FP, {"w": np.zeros(2)})
    names = [p.name for p in keeper.existing()]
    assert names == ["conversion_ppg_00000015.ckpt", "conversion_ppg_00000020.ckpt"]
    assert keeper.latest() == keeper.path_for(20)


def test_keeper_prefixes_do_not_collide(tmp_path):
    CheckpointKeeper(tmp_path, "wavenet", keep_last=1).save(1, FP, {"w": np.zeros(1)})
    flow = CheckpointKeeper(tmp_path, "flowavenet", keep_last=1)
    flow.save(1, FP, {"w": np.zeros(1)})
    assert len(list(tmp_path.glob("*.ckpt"))) == 2


def test_model_state_round_trip(tmp_path):
    model = Model(seed=4)
    model.factory.normal("w", (4, 4), 0.3)
    model.buffers["mel_mean"] = np.linspace(-1, 1, 4)
    path = save_checkpoint(tmp_path / "m.ckpt", FP, model.state_arrays())

    fresh = Model(seed=5)
    fresh.factory.normal("w", (4, 4), 0.3)
    fresh.buffers["mel_mean"] = np.zeros(4)
    fresh.load_state_arrays(load_checkpoint(path, FP).arrays)
    np.testing.assert_array_equal(fresh.params["w"].data, model.params["w"].data)
    np.testing.assert_array_equal(fresh.buffers["mel_mean"], model.buffers["mel_mean"])
