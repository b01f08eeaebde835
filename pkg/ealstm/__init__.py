# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

from __future__ import absolute_import

from .config import RunConfig
from .crs import CrsConfig, EvolutionResult, GenerationReport, Genome, decode, evolve
from .data import (
    RawSeries,
    Split,
    WindowDataset,
    build_windows,
    fit_normalizer,
    load_csv,
    load_files,
)
from .gradtrain import AdamState, TrainConfig, TrainResult, adam_step, evaluate, train
from .harness import (
    RunReport,
    export_attention,
    mae,
    read_attention,
    rmse,
    run_baseline,
    run_evolve,
    run_train,
)
from .model import LstmParams, ModelConfig, Task, backward, forward, init_params, predict
from .ndcore import Rng


__all__ = [
    "AdamState",
    "CrsConfig",
    "EvolutionResult",
    "GenerationReport",
    "Genome",
    "LstmParams",
    "ModelConfig",
    "RawSeries",
    "Rng",
    "RunConfig",
    "RunReport",
    "Split",
    "Task",
    "TrainConfig",
    "TrainResult",
    "WindowDataset",
    "adam_step",
    "backward",
    "build_windows",
    "decode",
    "evaluate",
    "evolve",
    "export_attention",
    "fit_normalizer",
    "forward",
    "init_params",
    "load_csv",
    "load_files",
    "mae",
    "predict",
    "read_attention",
    "rmse",
    "run_baseline",
    "run_evolve",
    "run_train",
    "train",
]
