import numpy as np
import pytest

from services.optimizer import AdamState, adam_step, default_decay, lr_schedule
from services.trainer import TrainingConfig


def test_first_step_moves_each_coordinate_by_lr():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 1e-3])}
    new, state = adam_step(params, grads, AdamState.zeros_like(params), lr=0.1)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.sign(grads["w"]), atol=1e-5)
    assert state.t == 1
    np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])


def test_matches_a_reference_sequence():
    p = np.array([0.3])
    m = v = np.zeros(1)
    params, state = {"p": p.copy()}, AdamState.zeros_like({"p": p})
    for t in range(1, 6):
        g = 2.0 * p
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        params, state = adam_step(params, {"p": 2.0 * params["p"]}, state, lr=0.01)
        np.testing.assert_allclose(params["p"], p, rtol=1e-10)


def test_missing_gradient_counts_as_zero():
    params = {"a": np.ones(2), "b": np.ones(2)}
    new, state = adam_step(params, {"a": np.ones(2)}, AdamState.zeros_like(params), lr=0.1)
    np.testing.assert_array_equal(new["b"], params["b"])
    np.testing.assert_array_equal(state.m["b"], 0.0)


def test_rejects_bad_gradients_before_updating():
    params = {"a": np.ones(2), "b": np.ones(2)}
    state = AdamState.zeros_like(params)
    with pytest.raises(ValueError, match="non-finite gradient for parameter 'b'"):
        adam_step(params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, lr=0.1)
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"a": np.ones(3)}, state, lr=0.1)
    assert state.t == 0


def test_default_decay_reaches_a_tenth():
    cfg = TrainingConfig(iterations=101, lr=1e-3)
    assert lr_schedule(0, cfg) == pytest.approx(1e-3)
    assert lr_schedule(100, cfg) == pytest.approx(1e-4)
    assert default_decay(1) == 1.0


def test_explicit_decay_and_range():
    cfg = TrainingConfig(iterations=10, lr=1.0, decay=0.5)
    assert lr_schedule(3, cfg) == pytest.approx(0.125)
    with pytest.raises(ValueError, match="outside"):
        lr_schedule(10, cfg)
