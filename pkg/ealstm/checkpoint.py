# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Versioned protobuf checkpoint of a trained network, its attention and the target
normalizer, so a model can be re-evaluated without retraining."""

from __future__ import absolute_import

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import betterproto
import numpy as np
import numpy.typing as npt

from .data import Normalizer
from .exceptions import CheckpointError, ContractViolationError
from .model import LstmParams, Task
from .ndcore import DTYPE

FORMAT_VERSION = 1


@dataclass(eq=False, repr=False)
class TensorMessage(betterproto.Message):
    name: str = betterproto.string_field(1)
    shape: List[int] = betterproto.uint32_field(2)
    values: List[float] = betterproto.double_field(3)


@dataclass(eq=False, repr=False)
class CheckpointMessage(betterproto.Message):
    format_version: int = betterproto.uint32_field(1)
    task: str = betterproto.string_field(2)
    window: int = betterproto.uint32_field(3)
    tensors: List["TensorMessage"] = betterproto.message_field(4)
    attention: List[float] = betterproto.double_field(5)
    norm_min: List[float] = betterproto.double_field(6)
    norm_max: List[float] = betterproto.double_field(7)
    feature_names: List[str] = betterproto.string_field(8)
    target_index: int = betterproto.uint32_field(9)


@dataclass
class Checkpoint:
    params: LstmParams
    attention: npt.NDArray[np.float64]
    normalizer: Optional[Normalizer] = None
    feature_names: Tuple[str, ...] = ()
    target_index: int = 0

    @property
    def window(self) -> int:
        return int(self.attention.shape[0])


def to_message(ckpt: Checkpoint) -> CheckpointMessage:
    msg = CheckpointMessage(
        format_version=FORMAT_VERSION,
        task=Task(ckpt.params.task).value,
        window=ckpt.window,
        tensors=[
            TensorMessage(name=name, shape=list(value.shape), values=value.ravel().tolist())
            for name, value in ckpt.params.named_tensors().items()
        ],
        attention=ckpt.attention.tolist(),
        feature_names=list(ckpt.feature_names),
        target_index=ckpt.target_index,
    )
    if ckpt.normalizer is not None:
        msg.norm_min = ckpt.normalizer.minimum.tolist()
        msg.norm_max = ckpt.normalizer.maximum.tolist()
    return msg


def from_message(msg: CheckpointMessage) -> Checkpoint:
    """Rebuild a :class:`Checkpoint`.

    Raises:
        CheckpointError: Unsupported version or inconsistent tensors.
    """
    if msg.format_version != FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint format version {msg.format_version}, "
            f"expected {FORMAT_VERSION}"
        )
    tensors = {}
    for t in msg.tensors:
        values = np.asarray(t.values, dtype=DTYPE)
        if values.size != int(np.prod(t.shape)):
            raise CheckpointError(f"Tensor {t.name} holds {values.size} values for shape {t.shape}")
        tensors[t.name] = values.reshape(tuple(t.shape))
    try:
        params = LstmParams.from_named(tensors, Task(msg.task))
    except (KeyError, ValueError, ContractViolationError) as e:
        raise CheckpointError(f"Checkpoint tensors are incomplete: {e}")

    attention = np.asarray(msg.attention, dtype=DTYPE)
    if attention.shape != (msg.window,):
        raise CheckpointError(f"Attention holds {attention.size} weights for window {msg.window}")
    normalizer = None
    if msg.norm_min:
        normalizer = Normalizer(
            minimum=np.asarray(msg.norm_min, dtype=DTYPE),
            maximum=np.asarray(msg.norm_max, dtype=DTYPE),
        )
    return Checkpoint(
        params=params,
        attention=attention,
        normalizer=normalizer,
        feature_names=tuple(msg.feature_names),
        target_index=msg.target_index,
    )


def save(path: str, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(bytes(to_message(ckpt)))
    logging.info("Wrote checkpoint %s", path)


def load(path: str) -> Checkpoint:
    """Read a checkpoint written by :func:`save`.

    Raises:
        CheckpointError: The file can't be read or parsed.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    try:
        msg = CheckpointMessage().parse(data)
    except Exception as e:
        raise CheckpointError(f"Cannot parse checkpoint {path}: {e}")
    return from_message(msg)
