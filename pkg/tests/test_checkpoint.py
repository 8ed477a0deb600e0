"""Checkpoint format: bit-exact round trip, corruption detection, model state."""

import numpy as np
import pytest

from mulan.checkpoint import (
    MAGIC,
    gather_state,
    load_checkpoint,
    restore_state,
    save_checkpoint,
)
from mulan.errors import CheckpointError
from mulan.model import HeadConfig, SiameseModel
from mulan.train import SGDMomentum


def small_model(seed=0, **kw):
    fields = dict(backbone_channels=(4, 8), proj_hidden=16, proj_out=8,
                  pred_hidden=16)
    fields.update(kw)
    return SiameseModel.create(HeadConfig.for_method("byol", **fields), seed=seed)


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a/w": rng.standard_normal((3, 4)).astype(np.float32),
        "b/scalar": np.asarray(2.5, dtype=np.float64),
        "c/deep": rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
    }
    path = tmp_path / "model.muln"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(loaded[name], arrays[name])


def test_magic_bytes_present(tmp_path):
    path = tmp_path / "m.muln"
    save_checkpoint(path, {"x": np.zeros(2, dtype=np.float32)})
    assert path.read_bytes()[:4] == MAGIC == b"MULN"


def test_any_corrupted_byte_fails_checksum(tmp_path):
    path = tmp_path / "m.muln"
    save_checkpoint(path, {"x": np.arange(6, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    rng = np.random.default_rng(1)
    for _ in range(20):
        pos = int(rng.integers(4, len(blob) - 4))
        corrupted = bytearray(blob)
        corrupted[pos] ^= 0xFF
        bad = path.with_name("bad.muln")
        bad.write_bytes(bytes(corrupted))
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.muln"
    save_checkpoint(path, {"x": np.arange(6, dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_model_state_roundtrip_parameter_exact(tmp_path):
    model = small_model(seed=3)
    opt = SGDMomentum(model.trainable_named_params())
    for _, p in model.trainable_named_params():
        p.grad = np.ones_like(p.data)
    opt.step(0.1, 0.1)

    path = tmp_path / "state.muln"
    save_checkpoint(path, gather_state(model, opt, step=17))

    clone = small_model(seed=99)  # different init, same shapes
    velocities, step = restore_state(clone, load_checkpoint(path))
    assert step == 17
    want = dict(model.trainable_named_params())
    for name, p in clone.trainable_named_params():
        assert np.array_equal(p.data, want[name].data), name
    tgt = dict(model.target_named_params())
    for name, p in clone.target_named_params():
        assert np.array_equal(p.data, tgt[name].data), name
    assert set(velocities) == set(opt.state_arrays())
    for name, v in velocities.items():
        assert np.array_equal(v, opt.state_arrays()[name])


def test_shape_mismatch_names_offending_tensor(tmp_path):
    model = small_model(seed=0)
    path = tmp_path / "state.muln"
    save_checkpoint(path, gather_state(model, None, 0))
    other = small_model(seed=0, proj_out=4)  # different head config
    with pytest.raises(CheckpointError, match="projector"):
        restore_state(other, load_checkpoint(path))


def test_missing_tensor_rejected(tmp_path):
    model = small_model(seed=0)
    arrays = gather_state(model, None, 0)
    key = next(iter(k for k in arrays if k.startswith("param/")))
    del arrays[key]
    path = tmp_path / "state.muln"
    save_checkpoint(path, arrays)
    with pytest.raises(CheckpointError, match="missing"):
        restore_state(small_model(seed=1), load_checkpoint(path))
