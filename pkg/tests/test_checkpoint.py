import zipfile

import numpy as np
import pytest

from services.checkpoint import (
    CheckpointError,
    checkpoint_path,
    config_hash,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from services.optimizer import AdamState, adam_step

CONFIG = {"iterations": 10, "lr": 0.001, "checkpoint_interval": 5, "log_interval": 1}


def _state():
    params = {"geometry.w0": np.arange(6.0).reshape(2, 3), "renderer.log_kappa": np.array([np.log(20.0)])}
    grads = {k: np.full_like(v, 0.1) for k, v in params.items()}
    params, adam = adam_step(params, grads, AdamState.zeros_like(params), lr=0.01)
    return params, adam


def test_round_trip_is_exact(tmp_path):
    params, adam = _state()
    path = save_checkpoint(tmp_path / "ckpt.npz", params, adam, 7, 3, CONFIG)
    state = load_checkpoint(path, expected_hash=config_hash(CONFIG))
    assert state.iteration == 7 and state.seed == 3 and state.adam.t == 1
    assert state.config == CONFIG
    for name in params:
        np.testing.assert_array_equal(state.params[name], params[name])
        np.testing.assert_array_equal(state.adam.m[name], adam.m[name])
        np.testing.assert_array_equal(state.adam.v[name], adam.v[name])


def test_identical_state_gives_identical_bytes(tmp_path):
    params, adam = _state()
    a = save_checkpoint(tmp_path / "a.npz", params, adam, 1, 0, CONFIG)
    b = save_checkpoint(tmp_path / "b.npz", params, adam, 1, 0, dict(reversed(list(CONFIG.items()))))
    assert a.read_bytes() == b.read_bytes()
    assert not (tmp_path / "a.npz.tmp").exists()


def test_archive_is_a_plain_npz(tmp_path):
    params, adam = _state()
    path = save_checkpoint(tmp_path / "ckpt.npz", params, adam, 1, 0, CONFIG)
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        assert names == sorted(names)
        assert all(info.compress_type == zipfile.ZIP_STORED for info in zf.infolist())
    with np.load(path) as archive:
        assert archive["param/geometry.w0"].dtype == np.dtype("<f8")
        assert int(archive["meta/iteration"]) == 1


def test_hash_ignores_bookkeeping_keys():
    assert config_hash(CONFIG) == config_hash({**CONFIG, "checkpoint_interval": 100, "log_interval": 9})
    assert config_hash(CONFIG) != config_hash({**CONFIG, "lr": 0.002})


def test_hash_mismatch_needs_force(tmp_path, caplog):
    params, adam = _state()
    path = save_checkpoint(tmp_path / "ckpt.npz", params, adam, 1, 0, CONFIG)
    other = config_hash({**CONFIG, "lr": 0.5})
    with pytest.raises(CheckpointError, match="--force"):
        load_checkpoint(path, expected_hash=other)
    with caplog.at_level("WARNING", logger="checkpoint"):
        state = load_checkpoint(path, expected_hash=other, force=True)
    assert state.iteration == 1
    assert "different config" in caplog.text


def test_truncated_and_missing_archives(tmp_path):
    params, adam = _state()
    path = save_checkpoint(tmp_path / "ckpt.npz", params, adam, 1, 0, CONFIG)
    cut = tmp_path / "cut.npz"
    cut.write_bytes(path.read_bytes()[: len(path.read_bytes()) // 2])
    with pytest.raises(CheckpointError, match="corrupt or truncated"):
        load_checkpoint(cut)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.npz")


def test_wrong_format_version(tmp_path):
    path = tmp_path / "old.npz"
    np.savez(path, **{"param/x": np.zeros(1), "meta/format_version": np.array(99),
                      "meta/config_hash": np.array("abc")})
    with pytest.raises(CheckpointError, match="format version 99"):
        load_checkpoint(path)


def test_latest_checkpoint_picks_the_highest_iteration(tmp_path):
    assert latest_checkpoint(tmp_path) is None
    params, adam = _state()
    for it in (5, 20, 10):
        save_checkpoint(checkpoint_path(tmp_path, it), params, adam, it, 0, CONFIG)
    (tmp_path / "checkpoints" / "notes.txt").write_text("x")
    assert latest_checkpoint(tmp_path).name == "ckpt_000020.npz"
