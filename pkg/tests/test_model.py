# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

from __future__ import absolute_import

import logging
import math
from typing import Any, Callable, Dict

import numpy as np
import pytest

import ealstm
from ealstm import model
from ealstm.exceptions import ContractViolationError, NonFiniteError
from ealstm.ndcore import Rng


def _numeric_grad(
    tensors: Dict[str, np.ndarray], name: str, index: int, f: Callable[[Dict], float]
) -> float:
    eps = 1e-5
    plus = {k: np.array(v) for k, v in tensors.items()}
    minus = {k: np.array(v) for k, v in tensors.items()}
    plus[name].reshape(-1)[index] += eps
    minus[name].reshape(-1)[index] -= eps
    return (f(plus) - f(minus)) / (2 * eps)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a) + abs(b), 1e-4)


def test_gradients_match_central_differences() -> None:
    rng = Rng(11)
    params = model.init_params(rng.spawn(0), input_size=3, hidden_size=4, layers=2, scale=0.5)
    windows = rng.spawn(1).gaussian((2, 5, 3))
    targets = np.array([0.3, -0.2])
    attn = rng.spawn(2).uniform(5) + 0.1

    def total_loss(tensors: Dict[str, np.ndarray]) -> float:
        p = model.LstmParams.from_named(tensors, params.task)
        pred = model.forward(windows, attn, p).predictions
        return float(np.sum((pred - targets) ** 2))

    trace = model.forward(windows, attn, params)
    grads = model.backward(trace, params, 2.0 * (trace.predictions - targets)).named_tensors()

    tensors = {k: np.array(v) for k, v in params.named_tensors().items()}
    entries = [(name, k) for name, value in tensors.items() for k in range(value.size)]
    assert len(entries) >= 200
    picks = Rng(12).permutation(len(entries))[:200]
    worst = 0.0
    for p in picks:
        name, k = entries[p]
        numeric = _numeric_grad(tensors, name, k, total_loss)
        worst = max(worst, _rel_err(grads[name].reshape(-1)[k], numeric))
    assert worst < 1e-5


def test_attention_gradient_matches_central_differences(small_params: Any) -> None:
    rng = Rng(21)
    window = rng.gaussian((5, 3))
    attn = rng.uniform(5) + 0.1

    def f(w: np.ndarray) -> float:
        return float(model.forward(window, w, small_params).predictions[0] ** 2)

    trace = model.forward(window, attn, small_params)
    grads = model.backward(trace, small_params, 2.0 * trace.predictions, attn_trainable=True)
    eps = 1e-5
    for t in range(5):
        plus, minus = attn.copy(), attn.copy()
        plus[t] += eps
        minus[t] -= eps
        numeric = (f(plus) - f(minus)) / (2 * eps)
        assert _rel_err(grads.attention[t], numeric) < 1e-5


def test_classification_gradients_match_central_differences() -> None:
    rng = Rng(31)
    params = model.init_params(
        rng.spawn(0), 3, 4, task=model.Task.CLASSIFICATION, num_classes=3, scale=0.5
    )
    windows = rng.spawn(1).gaussian((3, 4, 3))
    labels = np.array([0, 2, 1])
    attn = np.ones(4)

    def total_loss(tensors: Dict[str, np.ndarray]) -> float:
        p = model.LstmParams.from_named(tensors, params.task)
        out = model.forward(windows, attn, p).output
        losses, _ = model.loss_and_grad(out, labels, model.LossKind.CROSS_ENTROPY)
        return float(losses.sum())

    trace = model.forward(windows, attn, params)
    _, dlogits = model.loss_and_grad(trace.output, labels, model.LossKind.CROSS_ENTROPY)
    grads = model.backward(trace, params, dlogits).named_tensors()
    tensors = {k: np.array(v) for k, v in params.named_tensors().items()}
    for name in ("w_out", "b_out", "layer0.w_xi", "layer0.w_co", "layer0.b_f"):
        for k in range(min(tensors[name].size, 6)):
            numeric = _numeric_grad(tensors, name, k, total_loss)
            assert _rel_err(grads[name].reshape(-1)[k], numeric) < 1e-5


def test_init_params_shapes_and_biases() -> None:
    params = model.init_params(Rng(0), input_size=3, hidden_size=5, layers=2)
    assert params.input_size == 3
    assert params.hidden_size == 5
    assert params.num_outputs == 1
    assert params.layers[1].input_size == 5
    np.testing.assert_array_equal(params.layers[0].b_f, np.ones(5))
    np.testing.assert_array_equal(params.layers[0].b_i, np.zeros(5))
    assert len(params.named_tensors()) == 2 * len(model.LAYER_TENSORS) + 2

    with pytest.raises(ContractViolationError):
        model.init_params(Rng(0), 3, 5, task=model.Task.CLASSIFICATION, num_classes=1)


def test_named_tensors_round_trip(small_params: Any) -> None:
    rebuilt = model.LstmParams.from_named(small_params.named_tensors())
    for name, value in small_params.named_tensors().items():
        np.testing.assert_array_equal(rebuilt.named_tensors()[name], value)


def test_params_reject_bad_shapes(small_params: Any) -> None:
    tensors = small_params.named_tensors()
    tensors["layer0.w_hf"] = np.zeros((4, 3))
    with pytest.raises(ContractViolationError):
        model.LstmParams.from_named(tensors)


def test_all_ones_attention_is_identity(small_params: Any) -> None:
    window = Rng(4).gaussian((6, 3))
    np.testing.assert_array_equal(model.apply_attention(window, np.ones(6)), window)

    scaled = model.apply_attention(window, np.arange(6) / 5.0)
    np.testing.assert_array_equal(scaled[0], np.zeros(3))
    np.testing.assert_array_equal(scaled[5], window[5])


def test_zero_attention_erases_a_step(small_params: Any) -> None:
    rng = Rng(8)
    a = rng.gaussian((4, 3))
    b = a.copy()
    b[1] = rng.gaussian(3)
    attn = np.array([1.0, 0.0, 1.0, 1.0])
    out_a = model.forward(a, attn, small_params).predictions
    out_b = model.forward(b, attn, small_params).predictions
    np.testing.assert_array_equal(out_a, out_b)


def test_single_window_equals_batch_of_one(small_params: Any) -> None:
    windows = Rng(5).gaussian((3, 4, 3))
    attn = np.full(4, 0.5)
    batch = model.forward(windows, attn, small_params).predictions
    for k in range(3):
        single = model.forward(windows[k], attn, small_params).predictions
        assert single.shape == (1,)
        assert single[0] == pytest.approx(batch[k], abs=1e-14)


def test_forward_is_deterministic(small_params: Any) -> None:
    window = Rng(6).gaussian((5, 3))
    attn = np.ones(5)
    a = model.forward(window, attn, small_params)
    b = model.forward(window, attn, small_params)
    np.testing.assert_array_equal(a.output, b.output)
    assert a.layers[0].h.shape == (1, 5, 4)


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def _reference_prediction(window: Any, attn: Any, params: model.LstmParams) -> float:
    """Unit-by-unit single-layer regression pass written out with scalars."""
    p = params.layers[0]
    d, m = p.input_size, p.hidden_size
    h = [0.0] * m
    c = [0.0] * m
    for t in range(len(attn)):
        x = [attn[t] * window[t][k] for k in range(d)]

        def pre(gate: str, j: int) -> float:
            w_x = getattr(p, f"w_x{gate}")
            w_h = getattr(p, f"w_h{gate}")
            total = getattr(p, f"b_{gate}")[j]
            total += sum(x[k] * w_x[k, j] for k in range(d))
            total += sum(h[k] * w_h[k, j] for k in range(m))
            return total

        new_c = [0.0] * m
        new_h = [0.0] * m
        for j in range(m):
            i = _sigmoid(pre("i", j) + p.w_ci[j] * c[j])
            f = _sigmoid(pre("f", j) + p.w_cf[j] * c[j])
            g = math.tanh(pre("c", j))
            o = _sigmoid(pre("o", j) + p.w_co[j] * c[j])
            new_c[j] = f * c[j] + i * g
            new_h[j] = o * math.tanh(new_c[j])
        h, c = new_h, new_c
    return float(params.b_out[0] + sum(params.w_out[0, j] * h[j] for j in range(m)))


def _one_unit(**values: float) -> model.LstmParams:
    tensors: Dict[str, Any] = {}
    for name in model.LAYER_TENSORS:
        shape = (1, 1) if name.startswith(("w_x", "w_h")) else (1,)
        tensors[f"layer0.{name}"] = np.full(shape, values.get(name, 0.0))
    tensors["w_out"] = np.full((1, 1), values.get("w_out", 0.0))
    tensors["b_out"] = np.full(1, values.get("b_out", 0.0))
    return model.LstmParams.from_named(tensors)


def test_zero_parameters_predict_the_output_bias(small_params: Any) -> None:
    tensors = {k: np.zeros_like(v) for k, v in small_params.named_tensors().items()}
    tensors["b_out"] = np.array([0.375])
    params = model.LstmParams.from_named(tensors)
    trace = model.forward(Rng(2).gaussian((5, 3)), np.ones(5), params)
    assert trace.predictions[0] == 0.375
    layer = trace.layers[0]
    for gate in (layer.i, layer.f, layer.o):
        np.testing.assert_array_equal(gate, np.full(gate.shape, 0.5))
    np.testing.assert_array_equal(layer.c, np.zeros(layer.c.shape))
    np.testing.assert_array_equal(layer.h, np.zeros(layer.h.shape))


def test_single_unit_single_step_by_hand() -> None:
    params = _one_unit(w_xi=0.5, w_xf=2.0, w_xc=1.0, w_xo=-0.5, b_i=0.25, w_out=2.0, b_out=0.1)
    x = 0.8
    i = _sigmoid(0.5 * x + 0.25)
    g = math.tanh(x)
    o = _sigmoid(-0.5 * x)
    c = i * g
    expected = 2.0 * o * math.tanh(c) + 0.1

    trace = model.forward([[1.0]], [x], params)
    assert trace.predictions[0] == pytest.approx(expected, rel=0, abs=1e-15)
    assert trace.layers[0].c[0, 0, 0] == pytest.approx(c, rel=0, abs=1e-15)


def test_forward_matches_scalar_reference() -> None:
    params = ealstm.init_params(Rng(12), input_size=3, hidden_size=4, scale=0.6)
    windows = Rng(13).gaussian((2, 5, 3))
    attn = np.array([0.2, 1.0, 0.5, 0.9, 0.05])
    got = model.forward(windows, attn, params).predictions
    for k in range(2):
        assert abs(got[k] - _reference_prediction(windows[k], attn, params)) < 1e-12


def test_attention_is_input_scaling(small_params: Any) -> None:
    window = Rng(14).gaussian((6, 3))
    attn = np.array([0.1, 0.3, 1.0, 0.02, 0.7, 0.5])
    direct = model.forward(window, attn, small_params).output
    prescaled = model.forward(model.apply_attention(window, attn), np.ones(6), small_params).output
    np.testing.assert_array_equal(direct, prescaled)


def test_zero_loss_gradient_gives_zero_gradients(small_params: Any) -> None:
    trace = model.forward(Rng(15).gaussian((3, 4, 3)), np.full(4, 0.5), small_params)
    grads = model.backward(trace, small_params, np.zeros(3), attn_trainable=True)
    for name, value in grads.named_tensors().items():
        assert not np.any(value), name


def test_zero_input_step_has_zero_attention_gradient(small_params: Any) -> None:
    windows = Rng(16).gaussian((2, 5, 3))
    windows[:, 2] = 0.0
    trace = model.forward(windows, np.full(5, 0.8), small_params)
    grads = model.backward(trace, small_params, np.array([0.7, -1.3]), attn_trainable=True)
    assert grads.attention[2] == 0.0
    assert np.all(grads.attention[[0, 1, 3, 4]] != 0.0)


def test_forward_rejects_bad_shapes(small_params: Any) -> None:
    with pytest.raises(ContractViolationError):
        model.forward(np.zeros((5, 3)), np.ones(4), small_params)
    with pytest.raises(ContractViolationError):
        model.forward(np.zeros((5, 2)), np.ones(5), small_params)


def test_forward_reports_non_finite_step(small_params: Any) -> None:
    window = np.zeros((5, 3))
    window[2, 0] = np.nan
    with pytest.raises(NonFiniteError) as e:
        model.forward(window, np.ones(5), small_params)
    assert e.value.time_step == 2


def test_backward_rejects_stale_trace(small_params: Any) -> None:
    trace = model.forward(np.zeros((5, 3)), np.ones(5), small_params)
    other = model.init_params(Rng(1), input_size=3, hidden_size=6)
    with pytest.raises(ContractViolationError):
        model.backward(trace, other, np.ones(1))
    with pytest.raises(ContractViolationError):
        model.backward(trace, small_params, np.ones(3))


def test_loss() -> None:
    assert model.loss(1.5, 1.0, model.LossKind.MSE) == 0.25
    assert model.loss(np.array([0.2, 0.8]), 1, "cross-entropy") == pytest.approx(-np.log(0.8))
    with pytest.raises(ContractViolationError):
        model.loss(np.array([0.2, 0.8]), 2, "cross-entropy")


def test_cross_entropy_clamps_zero_probability(caplog: Any) -> None:
    with caplog.at_level(logging.WARNING):
        value = model.loss(np.array([1.0, 0.0]), 1, model.LossKind.CROSS_ENTROPY)
    assert value == pytest.approx(-np.log(model.PROBABILITY_FLOOR))
    assert "Clamped" in caplog.text


def test_loss_and_grad_matches_per_sample_loss() -> None:
    out = np.array([[0.5], [2.0]])
    losses, grad = model.loss_and_grad(out, np.array([1.0, 1.0]), model.LossKind.MSE)
    np.testing.assert_allclose(losses, [0.25, 1.0])
    np.testing.assert_allclose(grad, [[-1.0], [2.0]])

    probs = np.array([[0.1, 0.9], [0.6, 0.4]])
    losses, grad = model.loss_and_grad(probs, np.array([1, 1]), model.LossKind.CROSS_ENTROPY)
    assert losses[1] == pytest.approx(model.loss(probs[1], 1, model.LossKind.CROSS_ENTROPY))
    np.testing.assert_allclose(grad, [[0.1, -0.1], [0.6, -0.6]])


def test_predict_chunks_match_forward(small_params: Any) -> None:
    windows = Rng(9).gaussian((7, 4, 3))
    attn = np.ones(4)
    chunked = model.predict(windows, attn, small_params, chunk=3)
    whole = model.forward(windows, attn, small_params).output
    np.testing.assert_allclose(chunked, whole, atol=1e-14)
    assert model.predict(windows[:0], attn, small_params).shape == (0, 1)


def test_model_config_init() -> None:
    cfg = ealstm.ModelConfig(hidden=6, layers=1, num_classes=3)
    params = cfg.init(Rng(0), input_size=2, task="classification")
    assert params.num_outputs == 3
    assert params.hidden_size == 6
    with pytest.raises(ContractViolationError):
        ealstm.ModelConfig(hidden=0)
