# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Attention-scaled peephole LSTM with hand-derived backpropagation through time.

Conventions: row vectors, so gate pre-activations read ``x @ W_x + h @ W_h``.
Peepholes are per-unit vectors (diagonal connections). The output gate reads the
previous cell state ``c^{t-1}``, like the input and forget gates, rather than the
freshly updated ``c^t`` used by some peephole variants.
"""

from __future__ import absolute_import

import enum
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from .exceptions import ContractViolationError, NonFiniteError
from .ndcore import DTYPE, Rng, gauss_init, sigmoid, softmax

Array = npt.NDArray[np.float64]

GATES = ("i", "f", "c", "o")
PEEPHOLE_GATES = ("i", "f", "o")
LAYER_TENSORS = (
    "w_xi",
    "w_xf",
    "w_xc",
    "w_xo",
    "w_hi",
    "w_hf",
    "w_hc",
    "w_ho",
    "w_ci",
    "w_cf",
    "w_co",
    "b_i",
    "b_f",
    "b_c",
    "b_o",
)
PROBABILITY_FLOOR = 1e-12
FORGET_BIAS = 1.0
PREDICT_CHUNK = 1024


class Task(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class LossKind(str, enum.Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross-entropy"


def loss_kind_for(task: Union[Task, str]) -> LossKind:
    return LossKind.MSE if Task(task) is Task.REGRESSION else LossKind.CROSS_ENTROPY


@dataclass(frozen=True)
class LayerParams:
    """Weights of one LSTM layer: ``d_in x m`` input matrices, ``m x m`` recurrent
    matrices, ``m``-vector peepholes and biases."""

    w_xi: Array
    w_xf: Array
    w_xc: Array
    w_xo: Array
    w_hi: Array
    w_hf: Array
    w_hc: Array
    w_ho: Array
    w_ci: Array
    w_cf: Array
    w_co: Array
    b_i: Array
    b_f: Array
    b_c: Array
    b_o: Array

    @property
    def input_size(self) -> int:
        return int(self.w_xi.shape[0])

    @property
    def hidden_size(self) -> int:
        return int(self.w_xi.shape[1])

    def tensors(self) -> Dict[str, Array]:
        return {name: getattr(self, name) for name in LAYER_TENSORS}

    def check(self) -> None:
        d, m = self.input_size, self.hidden_size
        for name in LAYER_TENSORS:
            if name.startswith("w_x"):
                expected: Tuple[int, ...] = (d, m)
            elif name.startswith("w_h"):
                expected = (m, m)
            else:
                expected = (m,)
            actual = getattr(self, name).shape
            if actual != expected:
                raise ContractViolationError(
                    f"Layer tensor {name} has shape {actual}, expected {expected}"
                )


@dataclass(frozen=True)
class LstmParams:
    """Every trainable tensor of the network.

    ``w_out`` is ``K x m`` and ``b_out`` a ``K``-vector; regression uses ``K = 1``
    and reads the single logit as the prediction, classification applies softmax.
    """

    layers: Tuple[LayerParams, ...]
    w_out: Array
    b_out: Array
    task: Task = Task.REGRESSION

    def __post_init__(self) -> None:
        if not self.layers:
            raise ContractViolationError("At least one LSTM layer is required")
        for k, layer in enumerate(self.layers):
            layer.check()
            if k > 0 and layer.input_size != self.layers[k - 1].hidden_size:
                raise ContractViolationError(
                    f"Layer {k} expects {layer.input_size} inputs but layer {k - 1} "
                    f"emits {self.layers[k - 1].hidden_size}"
                )
        k_out, m = self.w_out.shape
        if m != self.hidden_size or self.b_out.shape != (k_out,):
            raise ContractViolationError(
                f"Readout shapes {self.w_out.shape}/{self.b_out.shape} do not match "
                f"hidden size {self.hidden_size}"
            )
        if Task(self.task) is Task.REGRESSION and k_out != 1:
            raise ContractViolationError("A regression head has exactly one output")

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].hidden_size

    @property
    def num_outputs(self) -> int:
        return int(self.w_out.shape[0])

    def named_tensors(self) -> Dict[str, Array]:
        """Flatten to ``{"layer0.w_xi": ..., "w_out": ..., "b_out": ...}``."""
        out: Dict[str, Array] = {}
        for k, layer in enumerate(self.layers):
            for name, value in layer.tensors().items():
                out[f"layer{k}.{name}"] = value
        out["w_out"] = self.w_out
        out["b_out"] = self.b_out
        return out

    @classmethod
    def from_named(
        cls, tensors: Dict[str, Array], task: Union[Task, str] = Task.REGRESSION
    ) -> "LstmParams":
        """Inverse of :meth:`named_tensors`."""
        layers = []
        k = 0
        while f"layer{k}.w_xi" in tensors:
            layers.append(
                LayerParams(
                    **{
                        name: np.asarray(tensors[f"layer{k}.{name}"], dtype=DTYPE)
                        for name in LAYER_TENSORS
                    }
                )
            )
            k += 1
        return cls(
            layers=tuple(layers),
            w_out=np.asarray(tensors["w_out"], dtype=DTYPE),
            b_out=np.asarray(tensors["b_out"], dtype=DTYPE),
            task=Task(task),
        )

    def map(self, fn: Callable[[Array], Array]) -> "LstmParams":
        return LstmParams.from_named(
            {name: fn(value) for name, value in self.named_tensors().items()}, self.task
        )

    def copy(self) -> "LstmParams":
        return self.map(np.array)


def init_params(
    rng: Rng,
    input_size: int,
    hidden_size: int,
    layers: int = 1,
    task: Union[Task, str] = Task.REGRESSION,
    num_classes: int = 1,
    scale: float = 0.1,
) -> LstmParams:
    """Gaussian(0, scale^2) weights and peepholes, zero biases except the forget bias."""
    task = Task(task)
    num_outputs = 1 if task is Task.REGRESSION else num_classes
    if num_outputs < 1 or (task is Task.CLASSIFICATION and num_outputs < 2):
        raise ContractViolationError(f"Invalid class count {num_classes} for {task.value}")

    built = []
    d_in = input_size
    for _ in range(layers):
        tensors: Dict[str, Array] = {}
        for gate in GATES:
            tensors[f"w_x{gate}"] = gauss_init(rng, d_in, hidden_size, scale)
        for gate in GATES:
            tensors[f"w_h{gate}"] = gauss_init(rng, hidden_size, hidden_size, scale)
        for gate in PEEPHOLE_GATES:
            tensors[f"w_c{gate}"] = gauss_init(rng, 1, hidden_size, scale)[0]
        for gate in GATES:
            bias = FORGET_BIAS if gate == "f" else 0.0
            tensors[f"b_{gate}"] = np.full(hidden_size, bias, dtype=DTYPE)
        built.append(LayerParams(**tensors))
        d_in = hidden_size

    return LstmParams(
        layers=tuple(built),
        w_out=gauss_init(rng, num_outputs, hidden_size, scale),
        b_out=np.zeros(num_outputs, dtype=DTYPE),
        task=task,
    )


def _check_attention(attn: Any, length: int) -> Array:
    w = np.asarray(attn, dtype=DTYPE)
    if w.ndim != 1 or w.shape[0] != length:
        raise ContractViolationError(
            f"Attention has shape {w.shape}, expected a vector of length {length}"
        )
    return w


def apply_attention(window: Any, attn: Any) -> Array:
    """Scale row ``l`` of an ``L x d`` window (or of every window in a batch) by
    ``attn[l]``."""
    x = np.asarray(window, dtype=DTYPE)
    if x.ndim not in (2, 3):
        raise ContractViolationError(f"Windows must be L x d or B x L x d, got {x.shape}")
    w = _check_attention(attn, x.shape[-2])
    return x * w[:, None]


@dataclass
class LayerTrace:
    """Per-step activations of one layer, each ``B x L x m`` (``x`` is ``B x L x d_in``)."""

    x: Array
    i: Array
    f: Array
    g: Array
    o: Array
    c: Array
    h: Array


@dataclass
class ForwardTrace:
    """Everything :func:`backward` needs from a forward pass."""

    windows: Array
    attention: Array
    layers: List[LayerTrace]
    logits: Array
    output: Array
    task: Task

    @property
    def length(self) -> int:
        return int(self.windows.shape[1])

    @property
    def batch_size(self) -> int:
        return int(self.windows.shape[0])

    @property
    def attended(self) -> Array:
        return self.layers[0].x

    @property
    def predictions(self) -> Array:
        """``(B,)`` predictions for regression, ``(B, K)`` probabilities otherwise."""
        if self.task is Task.REGRESSION:
            return self.output[:, 0]
        return self.output


def _layer_forward(x: Array, p: LayerParams) -> LayerTrace:
    batch, length, _ = x.shape
    m = p.hidden_size
    proj = {gate: x @ getattr(p, f"w_x{gate}") for gate in GATES}
    acts = {name: np.empty((batch, length, m), dtype=DTYPE) for name in "ifgoch"}
    h = np.zeros((batch, m), dtype=DTYPE)
    c = np.zeros((batch, m), dtype=DTYPE)

    for t in range(length):
        i = sigmoid(proj["i"][:, t] + h @ p.w_hi + p.w_ci * c + p.b_i)
        f = sigmoid(proj["f"][:, t] + h @ p.w_hf + p.w_cf * c + p.b_f)
        g = np.tanh(proj["c"][:, t] + h @ p.w_hc + p.b_c)
        o = sigmoid(proj["o"][:, t] + h @ p.w_ho + p.w_co * c + p.b_o)
        c = f * c + i * g
        h = o * np.tanh(c)
        if not (np.isfinite(c).all() and np.isfinite(h).all()):
            raise NonFiniteError(time_step=t)
        for name, value in zip("ifgoch", (i, f, g, o, c, h)):
            acts[name][:, t] = value

    return LayerTrace(x=x, **acts)


def forward(window: Any, attn: Any, params: LstmParams) -> ForwardTrace:
    """Run the attention-scaled LSTM over one ``L x d`` window or a ``B x L x d`` batch.

    Hidden and cell states start at zero. The prediction is the affine readout of the
    last hidden state of the top layer.

    Raises:
        ContractViolationError: The window, attention and parameter shapes disagree.
        NonFiniteError: A cell or hidden state became non-finite.
    """
    x = np.asarray(window, dtype=DTYPE)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ContractViolationError(f"Windows must be L x d or B x L x d, got {x.shape}")
    if x.shape[2] != params.input_size:
        raise ContractViolationError(
            f"Windows carry {x.shape[2]} features, the network expects {params.input_size}"
        )
    w = _check_attention(attn, x.shape[1])

    layers = []
    inputs = apply_attention(x, w)
    for layer in params.layers:
        trace = _layer_forward(inputs, layer)
        layers.append(trace)
        inputs = trace.h

    logits = inputs[:, -1] @ params.w_out.T + params.b_out
    task = Task(params.task)
    output = softmax(logits) if task is Task.CLASSIFICATION else logits
    if not np.isfinite(output).all():
        raise NonFiniteError("Readout produced a non-finite value", time_step=x.shape[1] - 1)
    return ForwardTrace(
        windows=x, attention=w, layers=layers, logits=logits, output=output, task=task
    )


@dataclass
class Gradients:
    """Loss gradients: one array per :class:`LstmParams` tensor, plus the attention
    gradient when attention is trainable."""

    params: LstmParams
    attention: Optional[Array] = None

    def named_tensors(self) -> Dict[str, Array]:
        out = self.params.named_tensors()
        if self.attention is not None:
            out["attention"] = self.attention
        return out


def _layer_backward(
    trace: LayerTrace, p: LayerParams, dh_ext: Array
) -> Tuple[LayerParams, Array]:
    batch, length, m = trace.h.shape
    grads = {name: np.zeros(getattr(p, name).shape, dtype=DTYPE) for name in LAYER_TENSORS}
    dx = np.zeros(trace.x.shape, dtype=DTYPE)
    zeros = np.zeros((batch, m), dtype=DTYPE)
    dh_next = zeros
    dc_next = zeros

    for t in reversed(range(length)):
        c_prev = trace.c[:, t - 1] if t > 0 else zeros
        h_prev = trace.h[:, t - 1] if t > 0 else zeros
        i, f, g, o = trace.i[:, t], trace.f[:, t], trace.g[:, t], trace.o[:, t]
        tc = np.tanh(trace.c[:, t])

        dh = dh_ext[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = {
            "i": dc * g * i * (1.0 - i),
            "f": dc * c_prev * f * (1.0 - f),
            "c": dc * i * (1.0 - g * g),
            "o": dh * tc * o * (1.0 - o),
        }

        x_t = trace.x[:, t]
        dx_t = np.zeros(x_t.shape, dtype=DTYPE)
        dh_prev = np.zeros((batch, m), dtype=DTYPE)
        for gate in GATES:
            grads[f"w_x{gate}"] += x_t.T @ da[gate]
            grads[f"w_h{gate}"] += h_prev.T @ da[gate]
            grads[f"b_{gate}"] += da[gate].sum(axis=0)
            dx_t += da[gate] @ getattr(p, f"w_x{gate}").T
            dh_prev += da[gate] @ getattr(p, f"w_h{gate}").T

        dc_prev = dc * f
        for gate in PEEPHOLE_GATES:
            grads[f"w_c{gate}"] += (da[gate] * c_prev).sum(axis=0)
            dc_prev = dc_prev + da[gate] * getattr(p, f"w_c{gate}")

        dx[:, t] = dx_t
        dh_next = dh_prev
        dc_next = dc_prev

    return LayerParams(**grads), dx


def _check_trace(trace: ForwardTrace, params: LstmParams) -> None:
    if len(trace.layers) != len(params.layers):
        raise ContractViolationError(
            f"Trace has {len(trace.layers)} layers, parameters have {len(params.layers)}"
        )
    for k, (lt, layer) in enumerate(zip(trace.layers, params.layers)):
        if lt.x.shape[2] != layer.input_size or lt.h.shape[2] != layer.hidden_size:
            raise ContractViolationError(f"Stale trace: layer {k} shapes do not match")
    if trace.logits.shape[1] != params.num_outputs:
        raise ContractViolationError("Stale trace: readout width does not match")


def backward(
    trace: ForwardTrace,
    params: LstmParams,
    loss_grad: Any,
    attn_trainable: bool = False,
) -> Gradients:
    """Backpropagate through time.

    Args:
        trace: The trace of :func:`forward` run with ``params``.
        params: The parameters used for the forward pass.
        loss_grad: d(loss)/d(prediction) for regression, a scalar for a single window
                   or a ``(B,)`` vector; d(loss)/d(logits) for classification, a
                   ``(K,)`` or ``(B, K)`` array.
        attn_trainable: Also return d(loss)/d(attention), an ``L``-vector summed over
                        the batch.

    Raises:
        ContractViolationError: The trace doesn't belong to ``params`` or the loss
                                gradient has the wrong shape.
    """
    _check_trace(trace, params)
    batch = trace.batch_size
    num_outputs = params.num_outputs
    dy = np.asarray(loss_grad, dtype=DTYPE)
    if dy.size != batch * num_outputs:
        raise ContractViolationError(
            f"Loss gradient of shape {dy.shape} does not fit {batch} samples x "
            f"{num_outputs} outputs"
        )
    dy = dy.reshape(batch, num_outputs)

    h_last = trace.layers[-1].h[:, -1]
    d_w_out = dy.T @ h_last
    d_b_out = dy.sum(axis=0)

    dh = np.zeros(trace.layers[-1].h.shape, dtype=DTYPE)
    dh[:, -1] = dy @ params.w_out
    layer_grads: List[LayerParams] = []
    for lt, layer in zip(reversed(trace.layers), reversed(params.layers)):
        grads, dh = _layer_backward(lt, layer, dh)
        layer_grads.append(grads)
    layer_grads.reverse()

    attention = None
    if attn_trainable:
        attention = (dh * trace.windows).sum(axis=(0, 2))

    return Gradients(
        params=LstmParams(
            layers=tuple(layer_grads), w_out=d_w_out, b_out=d_b_out, task=params.task
        ),
        attention=attention,
    )


def _cross_entropy_terms(probs: Array, targets: Array) -> Tuple[Array, Array]:
    picked = probs[np.arange(probs.shape[0]), targets]
    clamped = picked < PROBABILITY_FLOOR
    return -np.log(np.maximum(picked, PROBABILITY_FLOOR)), clamped


def loss(prediction: Any, target: Any, kind: Union[LossKind, str]) -> float:
    """Per-sample loss.

    ``mse`` is ``(y_hat - y)^2``; ``cross-entropy`` is ``-log p[target]`` where
    ``prediction`` holds softmax probabilities. Probabilities below 1e-12 are clamped
    and a warning is logged.
    """
    kind = LossKind(kind)
    if kind is LossKind.MSE:
        y_hat = np.asarray(prediction, dtype=DTYPE)
        if y_hat.size != 1:
            raise ContractViolationError("MSE expects a scalar prediction")
        return float((float(y_hat.reshape(())) - float(target)) ** 2)

    probs = np.asarray(prediction, dtype=DTYPE)
    if probs.ndim != 1 or not 0 <= int(target) < probs.shape[0]:
        raise ContractViolationError(
            f"Cross-entropy needs a class vector and a class id, got {probs.shape}/{target}"
        )
    values, clamped = _cross_entropy_terms(probs[None], np.array([int(target)]))
    if clamped.any():
        logging.warning("Clamped a zero class probability at %s", PROBABILITY_FLOOR)
    return float(values[0])


def loss_and_grad(
    output: Array, targets: Array, kind: Union[LossKind, str]
) -> Tuple[Array, Array]:
    """Batched per-sample losses and their gradients with respect to the head.

    Returns ``(losses, grad)`` with ``losses`` of shape ``(B,)`` and ``grad`` of shape
    ``(B, K)``: d/d(prediction) for MSE, d/d(logits) for cross-entropy.
    """
    kind = LossKind(kind)
    if kind is LossKind.MSE:
        err = output[:, 0] - np.asarray(targets, dtype=DTYPE)
        return err * err, (2.0 * err)[:, None]

    labels = np.asarray(targets).astype(np.int64)
    values, clamped = _cross_entropy_terms(output, labels)
    if clamped.any():
        logging.warning(
            "Clamped %d zero class probabilities at %s", int(clamped.sum()), PROBABILITY_FLOOR
        )
    grad = np.array(output, dtype=DTYPE)
    grad[np.arange(grad.shape[0]), labels] -= 1.0
    return values, grad


def predict(windows: Array, attn: Any, params: LstmParams, chunk: int = PREDICT_CHUNK) -> Array:
    """Head outputs ``(n, K)`` for ``n`` windows, computed in chunks."""
    parts = [
        forward(windows[start : start + chunk], attn, params).output
        for start in range(0, windows.shape[0], chunk)
    ]
    if not parts:
        return np.zeros((0, params.num_outputs), dtype=DTYPE)
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class ModelConfig:
    """Network shape and initialization scale."""

    hidden: int = 128
    layers: int = 1
    num_classes: int = 2
    init_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.layers < 1:
            raise ContractViolationError(
                f"hidden and layers must be >= 1, got {self.hidden}/{self.layers}"
            )

    def init(self, rng: Rng, input_size: int, task: Union[Task, str]) -> LstmParams:
        return init_params(
            rng,
            input_size=input_size,
            hidden_size=self.hidden,
            layers=self.layers,
            task=task,
            num_classes=self.num_classes,
            scale=self.init_scale,
        )
