# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

from __future__ import absolute_import

import math
from dataclasses import replace
from typing import Any
from unittest import mock

import numpy as np
import pytest

from ealstm import gradtrain, model
from ealstm.data import Split, WindowDataset
from ealstm.exceptions import ContractViolationError, DivergenceError, NonFiniteError
from ealstm.ndcore import Rng


def test_adam_first_step_is_lr_times_sign() -> None:
    params = {"w": np.array([0.5, -1.0, 2.0]), "b": np.array([0.0])}
    grads = {"w": np.array([0.3, -2.0, 7.5]), "b": np.array([-0.25])}
    state = gradtrain.AdamState(lr=1e-3)
    new, state = gradtrain.adam_step(params, grads, state)
    assert state.t == 1
    for name in params:
        np.testing.assert_allclose(
            new[name] - params[name], -1e-3 * np.sign(grads[name]), rtol=0, atol=1e-10
        )


def test_adam_matches_hand_unrolled_recurrence() -> None:
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    theta = 1.0
    gs = [0.5, -0.2, 0.1]
    m = v = 0.0
    expected = theta
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expected -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

    params = {"x": np.array([theta])}
    state = gradtrain.AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    for g in gs:
        params, state = gradtrain.adam_step(params, {"x": np.array([g])}, state)
    assert state.t == 3
    assert abs(params["x"][0] - expected) < 1e-12


def test_adam_zero_gradient_keeps_parameters() -> None:
    params = {"w": np.array([0.5, -2.0])}
    new, state = gradtrain.adam_step(params, {"w": np.zeros(2)}, gradtrain.AdamState(lr=0.1))
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.t == 1
    new, state = gradtrain.adam_step(new, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.t == 2


def test_adam_constant_gradient_moves_lr_per_step() -> None:
    lr, eps = 0.01, 1e-8
    params = {"x": np.array([1.0])}
    state = gradtrain.AdamState(lr=lr, eps=eps)
    for _ in range(3):
        params, state = gradtrain.adam_step(params, {"x": np.array([2.0])}, state)
    assert state.t == 3
    assert abs(params["x"][0] - (1.0 - 3 * lr * 2.0 / (2.0 + eps))) < 1e-12


def test_adam_leaves_inputs_untouched() -> None:
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.1, 0.1])}
    gradtrain.adam_step(params, grads, gradtrain.AdamState())
    np.testing.assert_array_equal(params["w"], [1.0, 2.0])


def test_adam_rejects_mismatched_or_non_finite_gradients() -> None:
    params = {"w": np.zeros(2)}
    state = gradtrain.AdamState()
    with pytest.raises(ContractViolationError):
        gradtrain.adam_step(params, {"v": np.zeros(2)}, state)
    with pytest.raises(ContractViolationError):
        gradtrain.adam_step(params, {"w": np.zeros(3)}, state)
    with pytest.raises(NonFiniteError):
        gradtrain.adam_step(params, {"w": np.array([np.nan, 0.0])}, state)


def test_train_config_validation() -> None:
    with pytest.raises(ContractViolationError):
        gradtrain.TrainConfig(batch_size=0)
    with pytest.raises(ContractViolationError):
        gradtrain.TrainConfig(lr=0.0)


def _init(dataset: WindowDataset, seed: int = 0) -> model.LstmParams:
    return model.ModelConfig(hidden=6, init_scale=0.3).init(
        Rng(seed), dataset.features, dataset.task
    )


def test_train_reduces_validation_loss(tiny_dataset: Any) -> None:
    cfg = gradtrain.TrainConfig(batch_size=16, grad_epochs=15, lr=1e-2, seed=3)
    init = _init(tiny_dataset)
    result = gradtrain.train(tiny_dataset, np.ones(4), cfg, init)
    assert len(result.history) == 15
    assert result.steps == 15 * 5
    assert result.final_valid_loss < result.initial_valid_loss
    assert result.final_valid_loss == pytest.approx(
        gradtrain.evaluate(tiny_dataset.valid, np.ones(4), result.params)
    )


def test_full_batch_takes_one_step_per_epoch(tiny_dataset: Any) -> None:
    cfg = gradtrain.TrainConfig(batch_size=len(tiny_dataset.train) + 5, grad_epochs=3)
    result = gradtrain.train(tiny_dataset, np.ones(4), cfg, _init(tiny_dataset))
    assert result.steps == 3
    assert len(result.history) == 3


@pytest.mark.parametrize("batch_size", [1, 4])
def test_single_window_epoch(batch_size: int) -> None:
    x = Rng(9).uniform((2, 4, 2))
    ds = WindowDataset.from_arrays(x, np.array([0.3, 0.6]), Split(train=1, valid=1, test=0))
    cfg = gradtrain.TrainConfig(batch_size=batch_size, grad_epochs=1)
    result = gradtrain.train(ds, np.ones(4), cfg, _init(ds))
    assert result.steps == math.ceil(1 / batch_size)


def test_evaluate_is_mean_of_per_sample_loss(tiny_dataset: Any) -> None:
    params = _init(tiny_dataset)
    attn = np.array([0.2, 0.4, 0.6, 1.0])
    part = tiny_dataset.valid
    total = 0.0
    for k in range(len(part)):
        prediction = model.forward(part.x[k], attn, params).predictions[0]
        total += model.loss(prediction, part.y[k], model.LossKind.MSE)
    assert gradtrain.evaluate(part, attn, params) == pytest.approx(total / len(part), rel=1e-12)


def test_train_does_not_mutate_initial_params(tiny_dataset: Any) -> None:
    init = _init(tiny_dataset)
    before = {k: np.array(v) for k, v in init.named_tensors().items()}
    gradtrain.train(tiny_dataset, np.ones(4), gradtrain.TrainConfig(batch_size=32), init)
    for name, value in init.named_tensors().items():
        np.testing.assert_array_equal(value, before[name])


def test_train_is_deterministic(tiny_dataset: Any) -> None:
    cfg = gradtrain.TrainConfig(batch_size=16, grad_epochs=2, seed=5)
    a = gradtrain.train(tiny_dataset, np.full(4, 0.5), cfg, _init(tiny_dataset))
    b = gradtrain.train(tiny_dataset, np.full(4, 0.5), cfg, _init(tiny_dataset))
    for name, value in a.params.named_tensors().items():
        np.testing.assert_array_equal(value, b.params.named_tensors()[name])
    assert a.final_valid_loss == b.final_valid_loss

    c = gradtrain.train(tiny_dataset, np.full(4, 0.5), replace(cfg, seed=6), _init(tiny_dataset))
    assert c.final_valid_loss != a.final_valid_loss


def test_trainable_attention_moves_and_stays_clamped(tiny_dataset: Any) -> None:
    cfg = gradtrain.TrainConfig(batch_size=16, grad_epochs=3, lr=5e-2, attn_trainable=True)
    start = np.full(4, 0.5)
    result = gradtrain.train(tiny_dataset, start, cfg, _init(tiny_dataset))
    assert not np.array_equal(result.attention, start)
    assert result.attention.min() >= gradtrain.ATTENTION_FLOOR
    assert result.attention.max() <= 1.0
    np.testing.assert_array_equal(start, np.full(4, 0.5))


def test_fixed_attention_is_returned_unchanged(tiny_dataset: Any) -> None:
    attn = np.array([0.25, 0.5, 0.75, 1.0])
    result = gradtrain.train(
        tiny_dataset, attn, gradtrain.TrainConfig(batch_size=64), _init(tiny_dataset)
    )
    np.testing.assert_array_equal(result.attention, attn)


def test_train_rejects_bad_inputs(tiny_dataset: Any) -> None:
    cfg = gradtrain.TrainConfig()
    with pytest.raises(ContractViolationError):
        gradtrain.train(tiny_dataset, np.ones(3), cfg, _init(tiny_dataset))

    x = np.zeros((3, 4, 2))
    empty_valid = WindowDataset.from_arrays(x, np.zeros(3), Split(train=2, valid=1, test=0))
    with pytest.raises(ContractViolationError):
        gradtrain.evaluate(empty_valid.test, np.ones(4), _init(tiny_dataset))


def test_train_raises_divergence(tiny_dataset: Any) -> None:
    cfg = gradtrain.TrainConfig(batch_size=16, grad_epochs=2)
    with mock.patch.object(gradtrain, "forward", side_effect=NonFiniteError(time_step=1)):
        with pytest.raises(DivergenceError) as e:
            gradtrain.train(tiny_dataset, np.ones(4), cfg, _init(tiny_dataset))
    assert e.value.last_finite_epoch == 0


def test_clip_scales_to_global_norm() -> None:
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = gradtrain._clip(grads, 1.0)
    assert clipped["a"][0] == pytest.approx(0.6)
    assert clipped["b"][0] == pytest.approx(0.8)
    assert gradtrain._clip(grads, None) is grads
    assert gradtrain._clip(grads, 10.0) is grads


def test_classification_training() -> None:
    rng = Rng(2)
    x = rng.uniform((60, 3, 2))
    y = (x[:, -1, 0] > 0.5).astype(float)
    ds = WindowDataset.from_arrays(x, y, Split(40, 10, 10), task="classification")
    init = model.ModelConfig(hidden=5, num_classes=2, init_scale=0.3).init(Rng(0), 2, ds.task)
    cfg = gradtrain.TrainConfig(batch_size=10, grad_epochs=10, lr=2e-2)
    result = gradtrain.train(ds, np.ones(3), cfg, init)
    assert result.final_valid_loss < result.initial_valid_loss
