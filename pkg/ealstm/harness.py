# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Experiment runs: dataset preparation, attention search, baselines, final training,
test metrics and the report files of a run directory."""

from __future__ import absolute_import

import contextlib
import enum
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd

from . import checkpoint
from .config import RunConfig
from .crs import CrsConfig, GenerationReport, Genome, decode, evolve
from .data import (
    Normalizer,
    RawSeries,
    Split,
    WindowDataset,
    build_windows,
    describe,
    informative_lag_classes,
    informative_lag_series,
    load_files,
    usable_windows,
)
from .exceptions import ContractViolationError, DataError, EaLstmError, ParseError, StageError
from .gradtrain import TrainConfig, TrainResult, evaluate, train
from .model import LossKind, LstmParams, ModelConfig, Task, predict
from .ndcore import DTYPE, Rng

Array = npt.NDArray[np.float64]

# Reference test errors on the normalized scale
REFERENCE_RESULTS = {
    "sml2010": {"mae": 0.0103, "rmse": 0.0154},
    "pm25": {"mae": 0.1902, "rmse": 0.2755},
}

# Published train+valid and test row counts
REFERENCE_SPLITS = {
    "sml2010": (3600, 537),
    "pm25": (35040, 8760),
}

SYNTHETIC_FEATURES = 2
TRAINABLE_ATTENTION_INIT = 0.5

# Child streams of a repeat's seed
DATA_STREAM = 10
FINAL_INIT_STREAM = 11
FINAL_ORDER_STREAM = 12

CONFIG_FILE = "config.txt"
GENERATIONS_FILE = "generations.csv"
ATTENTION_FILE = "attention.csv"
METRICS_FILE = "metrics.csv"
RESULT_FILE = "result.json"
REPORT_FILE = "report.txt"
CHECKPOINT_FILE = "model.ckpt"


class Mode(str, enum.Enum):
    EVOLVE = "evolve"
    TRAIN = "train"
    PLAIN_LSTM = "plain-lstm"
    ATTENTION_LSTM = "attention-lstm"


class Stage(str, enum.Enum):
    DATA = "data"
    EVOLVE = "evolve"
    TRAIN = "train"
    FINAL = "final"
    TEST = "test"
    REPORT = "report"


def _check_lengths(predictions: Any, targets: Any) -> Tuple[Array, Array]:
    p = np.asarray(predictions, dtype=DTYPE).ravel()
    t = np.asarray(targets, dtype=DTYPE).ravel()
    if p.size != t.size or p.size == 0:
        raise ContractViolationError(
            f"Need equal non-empty lengths, got {p.size} predictions and {t.size} targets"
        )
    return p, t


def rmse(predictions: Any, targets: Any) -> float:
    """Root mean squared error.

    Raises:
        ContractViolationError: Lengths differ or are zero.
    """
    p, t = _check_lengths(predictions, targets)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def mae(predictions: Any, targets: Any) -> float:
    """Mean absolute error.

    Raises:
        ContractViolationError: Lengths differ or are zero.
    """
    p, t = _check_lengths(predictions, targets)
    return float(np.mean(np.abs(p - t)))


def accuracy(logits: Any, labels: Any) -> float:
    """Fraction of rows whose argmax equals the integer label."""
    logits = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    labels = np.asarray(labels).astype(np.int64).ravel()
    if logits.shape[0] != labels.size or labels.size == 0:
        raise ContractViolationError(
            f"Need equal non-empty lengths, got {logits.shape[0]} rows and {labels.size} labels"
        )
    return float(np.mean(np.argmax(logits, axis=1) == labels))


class Progress:
    """Thread-safe run state read by the monitor server."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.stage: Optional[str] = None
        self.repeat = 0
        self.generations: List[Dict[str, Any]] = []
        self.done = False
        self.error: Optional[str] = None

    def set_stage(self, stage: Union[Stage, str], repeat: Optional[int] = None) -> None:
        with self._lock:
            self.stage = Stage(stage).value
            if repeat is not None:
                self.repeat = repeat

    def add_generation(self, report: GenerationReport) -> None:
        with self._lock:
            self.generations.append({"repeat": self.repeat, **report.to_dict()})

    def finish(self, error: Optional[BaseException] = None) -> None:
        with self._lock:
            self.done = True
            self.error = None if error is None else str(error)

    def snapshot(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "stage": self.stage,
                "repeat": self.repeat,
                "done": self.done,
                "error": self.error,
                "generations": list(self.generations),
            }


@contextlib.contextmanager
def stage(name: Stage, progress: Optional[Progress] = None, repeat: int = 0) -> Iterator[None]:
    """Tag failures inside the block with the run stage ``name``."""
    if progress is not None:
        progress.set_stage(name, repeat)
    logging.info("Stage %s (repeat %d)", name.value, repeat)
    try:
        yield
    except StageError:
        raise
    except (EaLstmError, OSError, ValueError, KeyError) as e:
        raise StageError(name.value, e)


@dataclass
class RunReport:
    """Everything a run produced; :meth:`to_record` plus the seed reproduces it."""

    mode: Mode
    config: RunConfig
    attention: Array
    metrics: Dict[str, float]
    generations: List[GenerationReport] = field(default_factory=list)
    repeat_metrics: List[Dict[str, float]] = field(default_factory=list)
    best_repeat: int = 0
    best_genome: Optional[str] = None
    params: Optional[LstmParams] = None
    dataset: Optional[WindowDataset] = None
    wall_clock: float = 0.0

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_record(self) -> Dict[str, Any]:
        """A JSON-ready record, without the wall-clock time."""
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "attention": self.attention.tolist(),
            "best_genome": self.best_genome,
            "best_repeat": self.best_repeat,
            "metrics": dict(self.metrics),
            "repeat_metrics": [dict(m) for m in self.repeat_metrics],
            "generations": [g.to_dict() for g in self.generations],
        }


def informative_lag(cfg: RunConfig) -> int:
    """Rows between the synthetic driver and its target: the window length minus one,
    so the driver sits at window step 1 of windows longer than one step."""
    return max(1, cfg.window - 1)


def load_series(cfg: RunConfig, seed: Optional[int] = None) -> RawSeries:
    """Read or synthesize the raw series a config names."""
    seed = cfg.seed if seed is None else seed
    if cfg.dataset == "synthetic":
        return informative_lag_series(
            Rng(seed).spawn(DATA_STREAM),
            cfg.synthetic_rows,
            SYNTHETIC_FEATURES,
            lag=informative_lag(cfg),
        )
    if cfg.dataset == "synthetic-class":
        return informative_lag_classes(
            Rng(seed).spawn(DATA_STREAM),
            cfg.synthetic_rows,
            SYNTHETIC_FEATURES,
            cfg.classes,
            lag=informative_lag(cfg),
        )
    return load_files(cfg.paths, cfg.dataset, cfg.target or None)


def prepare(
    cfg: RunConfig, seed: Optional[int] = None, normalizer: Optional[Normalizer] = None
) -> WindowDataset:
    """Load, clean, normalize and window the dataset of ``cfg``.

    ``train_valid = 0`` uses every usable window before the test block. A given
    ``normalizer`` replaces the one fit on the training rows.

    Raises:
        InsufficientDataError: Too few usable windows for the requested split.
    """
    series = load_series(cfg, seed)
    train_valid = cfg.train_valid
    if train_valid == 0:
        train_valid = len(usable_windows(series, cfg.window)) - cfg.test
        if train_valid < 2:
            raise DataError(
                f"Only {train_valid + cfg.test} usable windows; {cfg.test} are reserved for test"
            )
    try:
        split = Split.chronological(train_valid, cfg.test, cfg.valid_fraction)
    except ContractViolationError as e:
        raise DataError(str(e))
    dataset = build_windows(series, cfg.window, split, cfg.task_kind, normalizer)
    logging.info("Dataset %s: %s", cfg.dataset, describe(dataset))
    return dataset


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        hidden=cfg.hidden, layers=cfg.layers, num_classes=cfg.classes, init_scale=cfg.init_scale
    )


def train_config(cfg: RunConfig, epochs: Optional[int] = None, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size,
        grad_epochs=epochs or cfg.epochs,
        lr=cfg.lr,
        clip_norm=cfg.clip_norm,
        seed=seed,
    )


def final_train(
    dataset: WindowDataset,
    attention: Any,
    cfg: RunConfig,
    seed: int,
    attn_trainable: bool = False,
) -> TrainResult:
    """Train a fresh network with the final epoch budget under ``attention``."""
    rng = Rng(seed)
    init = model_config(cfg).init(rng.spawn(FINAL_INIT_STREAM), dataset.features, dataset.task)
    train_cfg = replace(
        train_config(cfg, cfg.effective_final_epochs, rng.derive_seed(FINAL_ORDER_STREAM)),
        attn_trainable=attn_trainable,
    )
    return train(dataset, attention, train_cfg, init)


def compute_metrics(dataset: WindowDataset, attention: Any, params: LstmParams) -> Dict[str, float]:
    """Validation and test metrics; regression errors on both the normalized and the
    raw scale, classification accuracy and cross-entropy."""
    out: Dict[str, float] = {}
    for name in ("valid", "test"):
        part = dataset.partition(name)
        if len(part) == 0:
            logging.warning("The %s partition is empty; no %s metrics", name, name)
            continue
        outputs = predict(part.x, attention, params)
        if dataset.task is Task.CLASSIFICATION:
            out[f"{name}_accuracy"] = accuracy(outputs, part.y)
            out[f"{name}_cross_entropy"] = evaluate(part, attention, params, LossKind.CROSS_ENTROPY)
            continue
        pred = outputs[:, 0]
        out[f"{name}_mae"] = mae(pred, part.y)
        out[f"{name}_rmse"] = rmse(pred, part.y)
        raw_pred = dataset.denormalize_target(pred)
        raw_true = dataset.denormalize_target(part.y)
        out[f"{name}_mae_raw"] = mae(raw_pred, raw_true)
        out[f"{name}_rmse_raw"] = rmse(raw_pred, raw_true)
    return out


def _average(metrics: Sequence[Dict[str, float]]) -> Dict[str, float]:
    keys = metrics[0].keys()
    return {k: float(np.mean([m[k] for m in metrics])) for k in keys}


@dataclass
class _Repeat:
    attention: Array
    result: TrainResult
    metrics: Dict[str, float]
    dataset: WindowDataset
    generations: List[GenerationReport] = field(default_factory=list)
    genome: Optional[str] = None


def _run(
    cfg: RunConfig,
    mode: Mode,
    attention: Optional[Any] = None,
    progress: Optional[Progress] = None,
    write: bool = True,
) -> RunReport:
    started = time.monotonic()
    repeats: List[_Repeat] = []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        with stage(Stage.DATA, progress, r):
            dataset = prepare(cfg, seed)

        generations: List[GenerationReport] = []
        genome = None
        trainable = False
        if mode is Mode.EVOLVE:
            with stage(Stage.EVOLVE, progress, r):
                evolved = evolve(
                    dataset,
                    train_config(cfg),
                    CrsConfig(
                        population=cfg.population,
                        champions=cfg.champions,
                        generations=cfg.generations,
                        seed=seed,
                        segment_bits=cfg.bits,
                        workers=cfg.workers,
                        warm_start=cfg.warm_start,
                    ),
                    model_config(cfg),
                    on_generation=progress.add_generation if progress else None,
                )
            weights = evolved.best_attention
            generations = evolved.reports
            genome = str(evolved.best_genome)
        elif mode is Mode.ATTENTION_LSTM:
            weights = np.full(dataset.length, TRAINABLE_ATTENTION_INIT, dtype=DTYPE)
            trainable = True
        elif mode is Mode.PLAIN_LSTM:
            weights = np.ones(dataset.length, dtype=DTYPE)
        else:
            weights = np.asarray(attention, dtype=DTYPE)
            if weights.shape != (dataset.length,):
                raise StageError(
                    Stage.TRAIN.value,
                    ContractViolationError(
                        f"{weights.size} attention weights for windows of {dataset.length} steps"
                    ),
                )

        with stage(Stage.FINAL if mode is Mode.EVOLVE else Stage.TRAIN, progress, r):
            result = final_train(dataset, weights, cfg, seed, attn_trainable=trainable)
        with stage(Stage.TEST, progress, r):
            metrics = compute_metrics(dataset, result.attention, result.params)
            metrics["final_valid_loss"] = result.final_valid_loss
        logging.info("Repeat %d metrics: %s", r, metrics)
        repeats.append(
            _Repeat(
                attention=result.attention,
                result=result,
                metrics=metrics,
                dataset=dataset,
                generations=generations,
                genome=genome,
            )
        )

    best = min(range(len(repeats)), key=lambda i: repeats[i].result.final_valid_loss)
    chosen = repeats[best]
    report = RunReport(
        mode=mode,
        config=cfg,
        attention=chosen.attention,
        metrics=_average([rep.metrics for rep in repeats]),
        generations=[g for rep in repeats for g in rep.generations],
        repeat_metrics=[rep.metrics for rep in repeats],
        best_repeat=best,
        best_genome=chosen.genome,
        params=chosen.result.params,
        dataset=chosen.dataset,
        wall_clock=time.monotonic() - started,
    )
    if write:
        with stage(Stage.REPORT, progress, best):
            write_report(report, cfg.out, per_repeat=[rep.generations for rep in repeats])
    return report


def run_evolve(
    cfg: RunConfig, progress: Optional[Progress] = None, write: bool = True
) -> RunReport:
    """Search attention, retrain the best genome with the final budget and test it.

    Raises:
        StageError: Any failure, tagged with the stage it happened in.
    """
    return _run(cfg, Mode.EVOLVE, progress=progress, write=write)


def run_baseline(
    cfg: RunConfig,
    mode: Union[Mode, str],
    progress: Optional[Progress] = None,
    write: bool = True,
) -> RunReport:
    """Train without search: ``plain-lstm`` fixes every weight at 1, ``attention-lstm``
    learns the weights by gradient, clamped to ``[1e-6, 1]``.

    Both share the data pipeline and final training budget of :func:`run_evolve`.
    """
    mode = Mode(mode)
    if mode not in (Mode.PLAIN_LSTM, Mode.ATTENTION_LSTM):
        raise ContractViolationError(f"Not a baseline mode: {mode.value}")
    return _run(cfg, mode, progress=progress, write=write)


def run_train(
    cfg: RunConfig,
    attention: Any,
    progress: Optional[Progress] = None,
    write: bool = True,
) -> RunReport:
    """Train and test once under a fixed attention vector."""
    return _run(cfg, Mode.TRAIN, attention=attention, progress=progress, write=write)


def write_attention(weights: Any, path: str) -> None:
    weights = np.asarray(weights, dtype=DTYPE)
    pd.DataFrame({"lag": np.arange(weights.size), "weight": weights}).to_csv(path, index=False)


def export_attention(report: RunReport, path: str) -> None:
    """Write ``L`` rows of ``lag,weight`` under a header."""
    if report.attention is None or report.attention.size == 0:
        raise ContractViolationError("The report holds no attention weights")
    write_attention(report.attention, path)
    logging.info("Wrote attention weights to %s", path)


def read_attention(path: str) -> Array:
    """Read an attention file written by :func:`export_attention`.

    Raises:
        ParseError: The file lacks the ``lag`` and ``weight`` columns or the lags are
                    not ``0 .. L-1``.
    """
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"Cannot read attention file {path}: {e}")
    if list(frame.columns) != ["lag", "weight"]:
        raise ParseError(f"Expected columns lag,weight, got {','.join(frame.columns)}", line=1)
    frame = frame.sort_values("lag")
    if not np.array_equal(frame["lag"].to_numpy(), np.arange(len(frame))):
        raise ParseError("Lags must be 0 .. L-1")
    return frame["weight"].to_numpy(dtype=DTYPE)


def parse_attention(text: str) -> Array:
    """Parse a comma-separated weight list such as ``0.5,1,1``."""
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=DTYPE)
    except ValueError as e:
        raise ContractViolationError(f"Invalid attention list '{text}': {e}")


def _generations_frame(per_repeat: Sequence[Sequence[GenerationReport]], bits: int) -> pd.DataFrame:
    rows = []
    for repeat, reports in enumerate(per_repeat):
        for g in reports:
            for position, (loss, genome) in enumerate(zip(g.champion_losses, g.champions)):
                weights = decode(Genome.from_string(genome, bits))
                rows.append(
                    {
                        "repeat": repeat,
                        "generation": g.generation,
                        "rank": position,
                        "loss": loss,
                        "genome": genome,
                        "weights": " ".join(repr(float(w)) for w in weights),
                        "best_ever_loss": g.best_ever_loss,
                        "mean_loss": g.mean_loss,
                        "cache_hits": g.cache_hits,
                        "diverged": g.diverged,
                    }
                )
    return pd.DataFrame(
        rows,
        columns=[
            "repeat", "generation", "rank", "loss", "genome", "weights",
            "best_ever_loss", "mean_loss", "cache_hits", "diverged",
        ],
    )


def render_report(report: RunReport) -> str:
    cfg = report.config
    lines = [
        f"ealstm {report.mode.value} run on {cfg.dataset}",
        f"seed {cfg.seed}, repeats {cfg.repeats}, best repeat {report.best_repeat}",
        f"wall clock {report.wall_clock:.1f}s",
        "",
        "metrics (mean over repeats):",
    ]
    for key, value in report.metrics.items():
        lines.append(f"  {key:<22} {value:.6g}")
    reference = REFERENCE_RESULTS.get(cfg.dataset)
    if reference and "test_rmse" in report.metrics:
        lines += [
            "",
            "reference test errors (normalized scale) vs measured:",
            f"  mae   {reference['mae']:.4f}   measured {report.metrics['test_mae']:.4f}",
            f"  rmse  {reference['rmse']:.4f}   measured {report.metrics['test_rmse']:.4f}",
        ]
    published = REFERENCE_SPLITS.get(cfg.dataset)
    if published and report.dataset is not None:
        split = report.dataset.split
        lines += [
            "",
            f"published train+valid/test rows {published[0]}/{published[1]}, "
            f"windows used {split.train + split.valid}/{split.test}",
        ]
        if cfg.dataset == "pm25":
            lines.append(
                "  windows whose pm2.5 target is missing are dropped; the published "
                "count is out of reach"
            )
    if report.best_genome:
        lines += ["", f"best genome {report.best_genome}"]
    lines += ["", "attention:"]
    lines += [f"  lag {k:>3}  {w:.6f}" for k, w in enumerate(report.attention)]
    return "\n".join(lines) + "\n"


def write_report(
    report: RunReport,
    out: str,
    per_repeat: Optional[Sequence[Sequence[GenerationReport]]] = None,
) -> None:
    """Write the run directory: config echo, generation and metric tables, attention,
    result record, readable report and the model checkpoint."""
    os.makedirs(out, exist_ok=True)
    report.config.write_echo(os.path.join(out, CONFIG_FILE))
    if report.mode is Mode.EVOLVE:
        _generations_frame(per_repeat or [report.generations], report.config.bits).to_csv(
            os.path.join(out, GENERATIONS_FILE), index=False
        )
    write_attention(report.attention, os.path.join(out, ATTENTION_FILE))

    metrics = pd.DataFrame(report.repeat_metrics)
    metrics.insert(0, "repeat", [str(r) for r in range(len(metrics))])
    metrics = pd.concat(
        [metrics, pd.DataFrame([{"repeat": "mean", **report.metrics}])], ignore_index=True
    )
    metrics.to_csv(os.path.join(out, METRICS_FILE), index=False)

    with open(os.path.join(out, RESULT_FILE), "w", encoding="utf-8") as f:
        json.dump({**report.to_record(), "wall_clock": report.wall_clock}, f, indent=2)
    with open(os.path.join(out, REPORT_FILE), "w", encoding="utf-8") as f:
        f.write(render_report(report))

    if report.params is not None and report.dataset is not None:
        checkpoint.save(
            os.path.join(out, CHECKPOINT_FILE),
            checkpoint.Checkpoint(
                params=report.params,
                attention=np.asarray(report.attention, dtype=DTYPE),
                normalizer=report.dataset.normalizer,
                feature_names=report.dataset.feature_names,
                target_index=report.dataset.target_index,
            ),
        )
    logging.info("Wrote run report to %s", out)


def evaluate_checkpoint(cfg: RunConfig, path: str) -> Dict[str, float]:
    """Test metrics of a saved model on the dataset of ``cfg``.

    Inputs are scaled and raw-scale errors denormalized with the checkpoint's own
    normalizer.

    Raises:
        StageError: The checkpoint can't be read (``test``), the data can't be prepared
                    (``data``), or the checkpoint's columns or window differ from the
                    dataset's (``test``).
    """
    with stage(Stage.TEST):
        ckpt = checkpoint.load(path)
    with stage(Stage.DATA):
        dataset = prepare(cfg, normalizer=ckpt.normalizer)
    with stage(Stage.TEST):
        if ckpt.feature_names and (
            tuple(ckpt.feature_names) != dataset.feature_names
            or ckpt.target_index != dataset.target_index
        ):
            raise ContractViolationError(
                f"Checkpoint was trained on {list(ckpt.feature_names)} predicting "
                f"{ckpt.feature_names[ckpt.target_index]!r}, the dataset has "
                f"{list(dataset.feature_names)} predicting "
                f"{dataset.feature_names[dataset.target_index]!r}"
            )
        if ckpt.window != dataset.length:
            raise ContractViolationError(
                f"Checkpoint window {ckpt.window} does not match dataset window {dataset.length}"
            )
        if ckpt.normalizer is None:
            logging.warning("Checkpoint %s has no normalizer; using one fit on this data", path)
        return compute_metrics(dataset, ckpt.attention, ckpt.params)
