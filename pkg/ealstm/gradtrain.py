# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Mini-batch Adam training of the LSTM under fixed or trainable attention."""

from __future__ import absolute_import

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import telemetry
from .data import WindowDataset, Windows
from .exceptions import ContractViolationError, DivergenceError, NonFiniteError
from .model import (
    LossKind,
    LstmParams,
    backward,
    forward,
    loss_and_grad,
    loss_kind_for,
    predict,
)
from .ndcore import DTYPE, Rng

Array = npt.NDArray[np.float64]
Tensors = Dict[str, Array]

ATTENTION_KEY = "attention"
ATTENTION_FLOOR = 1e-6


@dataclass(frozen=True)
class AdamState:
    """Adam moments keyed like the parameters they track."""

    m: Mapping[str, Array] = field(default_factory=dict)
    v: Mapping[str, Array] = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, Array], grads: Mapping[str, Array], state: AdamState
) -> Tuple[Tensors, AdamState]:
    """Apply one bias-corrected Adam update.

    ``m <- b1 m + (1 - b1) g``, ``v <- b2 v + (1 - b2) g^2``,
    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)``. Inputs are left untouched.

    Raises:
        ContractViolationError: ``grads`` doesn't cover ``params`` with equal shapes.
        NonFiniteError: A gradient is NaN or infinite; the step is rejected.
    """
    if set(grads) != set(params):
        raise ContractViolationError(
            f"Gradient keys {sorted(grads)} do not match parameters {sorted(params)}"
        )
    for name, value in params.items():
        g = np.asarray(grads[name])
        if g.shape != np.shape(value):
            raise ContractViolationError(
                f"Gradient of {name} has shape {g.shape}, expected {np.shape(value)}"
            )
        if not np.isfinite(g).all():
            raise NonFiniteError(f"Non-finite gradient for {name}; Adam step rejected")

    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params: Tensors = {}
    new_m: Tensors = {}
    new_v: Tensors = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        new_m[name] = state.beta1 * m + (1.0 - state.beta1) * g
        new_v[name] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = new_m[name] / bc1
        v_hat = new_v[name] / bc2
        new_params[name] = np.asarray(value, dtype=DTYPE) - state.lr * m_hat / (
            np.sqrt(v_hat) + state.eps
        )
    return new_params, replace(state, m=new_m, v=new_v, t=t)


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-training knobs. ``clip_norm`` of ``None`` disables clipping."""

    batch_size: int = 128
    grad_epochs: int = 5
    lr: float = 1e-3
    attn_trainable: bool = False
    seed: int = 0
    clip_norm: Optional[float] = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ContractViolationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_epochs < 1:
            raise ContractViolationError(f"grad_epochs must be >= 1, got {self.grad_epochs}")
        if not self.lr > 0:
            raise ContractViolationError(f"lr must be positive, got {self.lr}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float


@dataclass
class TrainResult:
    """Parameters after the final epoch plus the loss trajectory."""

    params: LstmParams
    attention: Array
    history: List[EpochRecord]
    initial_valid_loss: float
    steps: int

    @property
    def final_valid_loss(self) -> float:
        return self.history[-1].valid_loss if self.history else self.initial_valid_loss


def evaluate(
    partition: Windows,
    attn: Any,
    params: LstmParams,
    kind: Optional[Union[LossKind, str]] = None,
) -> float:
    """Mean per-sample loss over a partition. Nothing is mutated.

    Raises:
        ContractViolationError: The partition is empty.
    """
    if len(partition) == 0:
        raise ContractViolationError("Cannot evaluate an empty partition")
    kind = loss_kind_for(params.task) if kind is None else LossKind(kind)
    outputs = predict(partition.x, attn, params)
    losses, _ = loss_and_grad(outputs, partition.y, kind)
    return float(np.mean(losses))


def _clip(grads: Tensors, clip_norm: Optional[float]) -> Tensors:
    if clip_norm is None or clip_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {name: g * scale for name, g in grads.items()}


def train(
    dataset: WindowDataset,
    attn: Any,
    cfg: TrainConfig,
    init_params: LstmParams,
) -> TrainResult:
    """Train a private copy of ``init_params`` for ``cfg.grad_epochs`` epochs.

    Each epoch visits the training windows in an order drawn from ``cfg.seed``, in
    mini-batches of ``cfg.batch_size``. Attention stays fixed unless
    ``cfg.attn_trainable``, in which case it is updated with the other tensors and
    clamped to ``[1e-6, 1]`` after every step.

    Raises:
        ContractViolationError: The train or valid partition is empty.
        DivergenceError: A loss, state or gradient became non-finite.
    """
    train_part, valid_part = dataset.train, dataset.valid
    if len(train_part) == 0 or len(valid_part) == 0:
        raise ContractViolationError("Training needs non-empty train and valid partitions")

    kind = loss_kind_for(init_params.task)
    attention = np.array(attn, dtype=DTYPE)
    if attention.shape != (dataset.length,):
        raise ContractViolationError(
            f"Attention of shape {attention.shape} does not fit windows of {dataset.length} steps"
        )

    tensors: Tensors = {k: np.array(v) for k, v in init_params.named_tensors().items()}
    if cfg.attn_trainable:
        tensors[ATTENTION_KEY] = attention.copy()
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = Rng(cfg.seed)
    n = len(train_part)

    def current() -> Tuple[LstmParams, Array]:
        params = LstmParams.from_named(
            {k: v for k, v in tensors.items() if k != ATTENTION_KEY}, init_params.task
        )
        return params, tensors.get(ATTENTION_KEY, attention)

    initial = evaluate(valid_part, attention, init_params, kind)
    history: List[EpochRecord] = []
    steps = 0
    last_finite = 0

    with telemetry.TRAIN_SECONDS.time():
        for epoch in range(1, cfg.grad_epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                params, attn_now = current()
                try:
                    trace = forward(train_part.x[idx], attn_now, params)
                    losses, grad = loss_and_grad(trace.output, train_part.y[idx], kind)
                    grads = backward(
                        trace, params, grad / len(idx), cfg.attn_trainable
                    ).named_tensors()
                    tensors, state = adam_step(tensors, _clip(grads, cfg.clip_norm), state)
                except NonFiniteError as e:
                    raise DivergenceError(last_finite, f"{e}; last finite epoch was {last_finite}")
                if cfg.attn_trainable:
                    tensors[ATTENTION_KEY] = np.clip(tensors[ATTENTION_KEY], ATTENTION_FLOOR, 1.0)
                total += float(np.sum(losses))
                steps += 1
                telemetry.ADAM_STEPS.inc()

            params, attn_now = current()
            try:
                valid_loss = evaluate(valid_part, attn_now, params, kind)
            except NonFiniteError:
                valid_loss = math.nan
            if not math.isfinite(valid_loss) or not math.isfinite(total):
                raise DivergenceError(last_finite)
            last_finite = epoch
            history.append(EpochRecord(epoch=epoch, train_loss=total / n, valid_loss=valid_loss))
            logging.debug(
                "Epoch %d/%d: train %.6g, valid %.6g",
                epoch,
                cfg.grad_epochs,
                total / n,
                valid_loss,
            )

    params, attn_now = current()
    return TrainResult(
        params=params,
        attention=np.array(attn_now),
        history=history,
        initial_valid_loss=initial,
        steps=steps,
    )
