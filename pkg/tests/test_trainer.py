from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from services import trainer
from services.cameras import load_dataset
from services.checkpoint import CheckpointError, checkpoint_path, load_checkpoint
from services.trainer import (
    TrainingConfig,
    TrainingDivergedError,
    initial_state,
    iteration_seeds,
    kappa_of,
    load_trained,
    read_log,
    train,
    training_step,
)
from utils.ids import IDS


@pytest.fixture
def tiny_training(tiny_fields):
    return TrainingConfig(iterations=4, batch_rays=24, samples=12, quadrature_k=8, ray_chunks=2,
                          eikonal_points=16, light_reg_directions=16, checkpoint_interval=2,
                          seed=5, fields=tiny_fields)


@pytest.fixture
def dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


# ---------- config ----------

def test_config_round_trips_through_a_dict(tiny_training):
    again = TrainingConfig.from_dict(tiny_training.to_dict())
    assert again.to_dict() == tiny_training.to_dict()
    assert again.fields.geometry_width == 16


@pytest.mark.parametrize("data, match", [
    ({"fields": {"bogus": 1}}, "training.fields.bogus"),
    ({"batch_rays": 2, "ray_chunks": 4}, "ray_chunks"),
    ({"iterations": 0}, "iterations"),
    ({"decay": 1.5}, "decay"),
    ({"beta2": 1.0}, "beta2"),
])
def test_config_validation(data, match):
    with pytest.raises(ValueError, match=match):
        TrainingConfig.from_dict(data)


def test_iteration_seeds_depend_on_iteration_only():
    a = [s.generate_state(2).tolist() for s in iteration_seeds(3, 10)]
    b = [s.generate_state(2).tolist() for s in iteration_seeds(3, 10)]
    c = [s.generate_state(2).tolist() for s in iteration_seeds(3, 11)]
    assert a == b and a != c
    assert len({tuple(x) for x in a}) == 4


# ---------- single step ----------

def test_step_reaches_every_field_and_kappa(tiny_training, dataset):
    fields, params, _ = initial_state(tiny_training)
    step = training_step(fields, params, tiny_training, dataset, 0)
    assert set(step.grads) <= set(params)
    assert IDS.LOG_KAPPA in step.grads
    for prefix in ("geometry.", "material.", "light."):
        assert any(name.startswith(prefix) for name in step.grads)
    assert step.breakdown.is_finite()
    assert step.breakdown.terms[IDS.TERM_L1] > 0
    assert all(np.all(np.isfinite(g)) for g in step.grads.values())


def test_step_is_identical_with_a_thread_pool(tiny_training, dataset):
    fields, params, _ = initial_state(tiny_training)
    serial = training_step(fields, params, tiny_training, dataset, 2)
    with ThreadPoolExecutor(max_workers=2) as pool:
        threaded = training_step(fields, params, tiny_training, dataset, 2, pool)
    assert serial.breakdown.terms == threaded.breakdown.terms
    for name, g in serial.grads.items():
        np.testing.assert_array_equal(threaded.grads[name], g)


# ---------- full runs ----------

def test_train_writes_checkpoints_log_and_curves(tiny_training, dataset, tmp_path):
    result = train(tiny_training, dataset, tmp_path)
    assert result.checkpoint == checkpoint_path(tmp_path, 4)
    assert checkpoint_path(tmp_path, 2).is_file()
    assert (tmp_path / IDS.LOSS_CURVES_HTML).is_file()

    log = read_log(tmp_path / IDS.TRAIN_LOG)
    assert list(log.columns) == list(IDS.LOG_COLUMNS)
    assert log[IDS.COL_ITERATION].tolist() == [0, 1, 2, 3]
    assert log[IDS.COL_LR].iloc[0] == pytest.approx(tiny_training.lr)
    assert log[IDS.COL_LR].is_monotonic_decreasing
    assert log[IDS.COL_KAPPA].iloc[0] == pytest.approx(tiny_training.init_kappa)

    state = load_checkpoint(result.checkpoint)
    assert state.iteration == 4 and state.adam.t == 4
    for name, value in result.params.items():
        np.testing.assert_array_equal(state.params[name], value)


def test_resume_follows_the_uninterrupted_trajectory(tiny_training, dataset, tmp_path):
    straight = train(tiny_training, dataset, tmp_path / "a")

    train(tiny_training, dataset, tmp_path / "b")
    checkpoint_path(tmp_path / "b", 4).unlink()
    resumed = train(tiny_training, dataset, tmp_path / "b", resume=True)

    for name, value in straight.params.items():
        np.testing.assert_array_equal(resumed.params[name], value)
    pd.testing.assert_frame_equal(resumed.log, straight.log)


def test_resume_without_checkpoint_starts_fresh(tiny_training, dataset, tmp_path):
    result = train(replace(tiny_training, iterations=2), dataset, tmp_path, resume=True)
    assert result.log[IDS.COL_ITERATION].tolist() == [0, 1]


def test_resume_refuses_a_changed_config(tiny_training, dataset, tmp_path):
    train(tiny_training, dataset, tmp_path)
    changed = replace(tiny_training, lr=1e-2)
    with pytest.raises(CheckpointError, match="--force"):
        train(changed, dataset, tmp_path, resume=True)
    # bookkeeping keys do not count as a change
    again = train(replace(tiny_training, checkpoint_interval=4), dataset, tmp_path, resume=True)
    assert again.checkpoint == checkpoint_path(tmp_path, 4)


def test_divergence_keeps_the_last_good_state(tiny_training, dataset, tmp_path, monkeypatch):
    real = trainer.training_step

    def poisoned(fields, params, cfg, ds, iteration, pool=None):
        step = real(fields, params, cfg, ds, iteration, pool)
        if iteration == 1:
            step.grads[IDS.LOG_KAPPA] = np.array([np.nan])
        return step

    monkeypatch.setattr(trainer, "training_step", poisoned)
    with pytest.raises(TrainingDivergedError, match="gradient for renderer.log_kappa at iteration 1"):
        train(tiny_training, dataset, tmp_path)

    good = load_checkpoint(tmp_path / IDS.LAST_GOOD)
    assert good.iteration == 1
    assert read_log(tmp_path / IDS.TRAIN_LOG)[IDS.COL_ITERATION].tolist() == [0]


def test_load_trained_restores_fields_and_kappa(tiny_training, dataset, tmp_path):
    result = train(tiny_training, dataset, tmp_path)
    trained = load_trained(result.checkpoint)
    assert trained.iteration == 4
    assert trained.kappa == pytest.approx(kappa_of(result.params))
    assert trained.config.to_dict() == tiny_training.to_dict()
    for name, value in trained.fields.geometry.params.items():
        np.testing.assert_array_equal(value, result.params[name])


def test_read_log_checks_columns(tmp_path):
    assert read_log(tmp_path / "missing.csv").empty
    path = tmp_path / "bad.csv"
    pd.DataFrame({IDS.COL_ITERATION: [0], IDS.TERM_L1: [0.1]}).to_csv(path, index=False)
    with pytest.raises(ValueError, match="missing column"):
        read_log(path)
