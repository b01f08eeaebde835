# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Sensor CSV ingestion, cleaning, min-max normalization and sliding windows."""

from __future__ import absolute_import

import enum
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd
from sklearn.preprocessing import MinMaxScaler

from .exceptions import (
    ContractViolationError,
    DataError,
    InsufficientDataError,
    ParseError,
    UnknownSchemaError,
)
from .model import Task
from .ndcore import DTYPE, Rng

Array = npt.NDArray[np.float64]

NA_TOKENS = frozenset(["", "NA", "N/A", "NaN", "nan", "null"])
HEADER_INDEX = re.compile(r"^\d+:")
GENERIC = "generic"


@dataclass(frozen=True)
class Schema:
    """Column layout of a public dataset.

    ``features`` lists the sensor columns in model order and includes the target.
    """

    name: str
    features: Tuple[str, ...]
    target: str
    categorical: Mapping[str, Mapping[str, int]] = field(default_factory=dict)


SCHEMAS: Dict[str, Schema] = {
    "pm25": Schema(
        name="pm25",
        features=("pm2.5", "DEWP", "TEMP", "PRES", "cbwd", "Iws", "Is", "Ir"),
        target="pm2.5",
        categorical={"cbwd": {"NW": 0, "NE": 1, "SE": 2, "cv": 3}},
    ),
    "sml2010": Schema(
        name="sml2010",
        features=(
            "Temperature_Comedor_Sensor",
            "Weather_Temperature",
            "CO2_Comedor_Sensor",
            "Humedad_Comedor_Sensor",
            "Lighting_Comedor_Sensor",
            "Precipitacion",
            "Meteo_Exterior_Crepusculo",
            "Meteo_Exterior_Viento",
            "Meteo_Exterior_Sol_Oest",
            "Meteo_Exterior_Sol_Est",
            "Meteo_Exterior_Sol_Sud",
            "Meteo_Exterior_Piranometro",
            "Exterior_Entalpic_turbo",
            "Temperature_Exterior_Sensor",
            "Humedad_Exterior_Sensor",
            "Day_Of_Week",
        ),
        target="Temperature_Comedor_Sensor",
    ),
}


@dataclass(frozen=True)
class RawSeries:
    """Cleaned ``T x d`` sensor matrix.

    ``target_missing`` marks rows whose target was absent before imputation; those
    rows never serve as window targets.
    """

    feature_names: Tuple[str, ...]
    values: Array
    target_index: int
    target_missing: npt.NDArray[np.bool_]

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def features(self) -> int:
        return int(self.values.shape[1])

    @property
    def target(self) -> Array:
        return self.values[:, self.target_index]


def _read_header(path: str) -> Tuple[str, List[str]]:
    try:
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
    except UnicodeDecodeError as e:
        raise ParseError(f"Not valid UTF-8: {e}", line=1)
    if not header:
        raise ParseError("Missing header row", line=1)

    if "," in header:
        sep = ","
        tokens = [t.strip() for t in header.split(",")]
    else:
        sep = r"\s+"
        tokens = header.lstrip("#").split()
    names = [HEADER_INDEX.sub("", t).strip('"') for t in tokens]
    return sep, names


def _to_numeric(column: pd.Series, name: str, mapping: Optional[Mapping[str, int]]) -> Array:
    text = column.str.strip()
    missing = column.isna() | text.isin(NA_TOKENS)
    if mapping is not None:
        values = text.map(mapping)
    else:
        values = pd.to_numeric(text.where(~missing), errors="coerce")
    bad = values.isna() & ~missing
    if not bad.any():
        bad = ~missing & ~np.isfinite(values.fillna(0.0))
    if bad.any():
        pos = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(
            f"Invalid value {column.iloc[pos]!r} in column '{name}'",
            line=int(column.index[pos]) + 2,
        )
    return values.astype(DTYPE).to_numpy()


def load_csv(path: str, schema: str, target: Optional[str] = None) -> RawSeries:
    """Parse a sensor file into a cleaned :class:`RawSeries`.

    The delimiter is taken from the header: a comma-separated header means a CSV file,
    anything else is split on whitespace (the SML2010 layout, whose header tokens read
    ``N:Name``). Missing feature cells are forward-filled, leading gaps backfilled.

    Args:
        path: The file to read.
        schema: ``pm25``, ``sml2010`` or ``generic``.
        target: The target column name, required by the ``generic`` schema.

    Raises:
        UnknownSchemaError: ``schema`` is not registered.
        ParseError: A row has the wrong field count or a value doesn't parse; the
                    message carries the 1-based line number.
        DataError: A feature column has no values at all.
    """
    if schema != GENERIC and schema not in SCHEMAS:
        raise UnknownSchemaError(schema)
    if schema == GENERIC and not target:
        raise DataError("The generic schema needs a target column name")

    sep, names = _read_header(path)
    try:
        frame = pd.read_csv(
            path,
            sep=sep,
            header=None,
            skiprows=1,
            names=names,
            dtype=str,
            keep_default_na=False,
            index_col=False,
            skip_blank_lines=False,
            encoding="utf-8",
        )
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(str(e), line=int(match.group(1)) if match else None)

    blank = frame.isna().all(axis=1)
    short = frame.isna().any(axis=1) & ~blank
    if short.any():
        pos = int(np.flatnonzero(short.to_numpy())[0])
        raise ParseError(f"Expected {len(names)} fields", line=pos + 2)
    frame = frame[~blank.to_numpy()]

    if schema == GENERIC:
        columns = []
        for name in names:
            parsed = pd.to_numeric(frame[name].str.strip(), errors="coerce")
            if parsed.notna().any() or name == target:
                columns.append(name)
            else:
                logging.info("Skipping non-numeric column '%s'", name)
        layout = Schema(name=GENERIC, features=tuple(columns), target=str(target))
    else:
        layout = SCHEMAS[schema]

    absent = [c for c in layout.features if c not in frame.columns]
    if absent:
        raise ParseError(f"Missing columns {absent} for schema '{layout.name}'", line=1)

    data = pd.DataFrame(
        {
            name: _to_numeric(frame[name], name, layout.categorical.get(name))
            for name in layout.features
        }
    )
    target_missing = data[layout.target].isna().to_numpy()
    data = data.ffill().bfill()
    empty = [c for c in layout.features if data[c].isna().any()]
    if empty:
        raise DataError(f"Columns without any value: {empty}")

    logging.info(
        "Loaded %s: %d rows, %d features, %d missing targets",
        path,
        len(data),
        len(layout.features),
        int(target_missing.sum()),
    )
    return RawSeries(
        feature_names=layout.features,
        values=data.to_numpy(dtype=DTYPE),
        target_index=layout.features.index(layout.target),
        target_missing=target_missing,
    )


def load_files(
    paths: Sequence[str], schema: str, target: Optional[str] = None
) -> RawSeries:
    """Load files of one schema with :func:`load_csv` and join them in the given order.

    The files must be passed oldest first. Gaps are filled within each file.

    Raises:
        DataError: No path was given or the files disagree on their feature columns.
    """
    if not paths:
        raise DataError("No data file given")
    parts = [load_csv(path, schema, target) for path in paths]
    first = parts[0]
    if len(parts) == 1:
        return first
    for path, part in zip(paths[1:], parts[1:]):
        if part.feature_names != first.feature_names:
            raise DataError(
                f"{path} has columns {list(part.feature_names)}, "
                f"{paths[0]} has {list(first.feature_names)}"
            )
    logging.info("Joined %d files into %d rows", len(parts), sum(p.rows for p in parts))
    return RawSeries(
        feature_names=first.feature_names,
        values=np.vstack([p.values for p in parts]),
        target_index=first.target_index,
        target_missing=np.concatenate([p.target_missing for p in parts]),
    )


@dataclass(frozen=True)
class Normalizer:
    """Per-feature min-max map to [0, 1], fit on a training prefix.

    Constant features (``minimum == maximum``) normalize to 0.0 everywhere.
    """

    minimum: Array
    maximum: Array

    @property
    def constant(self) -> npt.NDArray[np.bool_]:
        return self.minimum == self.maximum

    def _scaler(self) -> MinMaxScaler:
        return MinMaxScaler().fit(np.vstack([self.minimum, self.maximum]))

    def transform(self, values: Array) -> Array:
        out = self._scaler().transform(np.asarray(values, dtype=DTYPE))
        out[:, self.constant] = 0.0
        return out

    def inverse_transform(self, values: Array) -> Array:
        return self._scaler().inverse_transform(np.asarray(values, dtype=DTYPE))

    def denormalize(self, values: Array, index: int) -> Array:
        """Map normalized values of feature ``index`` back to the raw scale."""
        scaler = self._scaler()
        return (np.asarray(values, dtype=DTYPE) - scaler.min_[index]) / scaler.scale_[index]

    def normalize(self, values: Array, index: int) -> Array:
        if self.constant[index]:
            return np.zeros_like(np.asarray(values, dtype=DTYPE))
        scaler = self._scaler()
        return np.asarray(values, dtype=DTYPE) * scaler.scale_[index] + scaler.min_[index]


def fit_normalizer(series: RawSeries, train_len: int) -> Normalizer:
    """Fit min/max on the first ``train_len`` rows only.

    Raises:
        ContractViolationError: ``train_len`` is below 2 or beyond the series.
    """
    if train_len < 2 or train_len > series.rows:
        raise ContractViolationError(
            f"train_len must be in [2, {series.rows}], got {train_len}"
        )
    prefix = series.values[:train_len]
    normalizer = Normalizer(minimum=prefix.min(axis=0), maximum=prefix.max(axis=0))
    for j in np.flatnonzero(normalizer.constant):
        logging.warning(
            "Feature '%s' is constant on the training rows; it normalizes to 0.0",
            series.feature_names[j],
        )
    return normalizer


class Partition(str, enum.Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


@dataclass(frozen=True)
class Split:
    """Window counts per partition, in chronological order train, valid, test."""

    train: int
    valid: int
    test: int

    def __post_init__(self) -> None:
        if self.train < 1 or self.valid < 1 or self.test < 0:
            raise ContractViolationError(
                f"Split needs train >= 1, valid >= 1 and test >= 0, got {self}"
            )

    @property
    def total(self) -> int:
        return self.train + self.valid + self.test

    @classmethod
    def chronological(cls, train_valid: int, test: int, valid_fraction: float = 0.1) -> "Split":
        """Carve the last ``valid_fraction`` of ``train_valid`` windows off as validation."""
        valid = int(round(train_valid * valid_fraction))
        return cls(train=train_valid - valid, valid=valid, test=test)


@dataclass(frozen=True)
class Windows:
    """One partition: ``x`` is ``n x L x d``, ``y`` holds ``n`` targets."""

    x: Array
    y: Array

    def __len__(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True)
class WindowDataset:
    """Normalized sliding windows, chronologically partitioned.

    Window ``k`` covers ``length`` consecutive rows ending right before its target
    row ``target_rows[k]``.
    """

    x: Array
    y: Array
    target_rows: npt.NDArray[np.int64]
    length: int
    split: Split
    normalizer: Optional[Normalizer]
    feature_names: Tuple[str, ...]
    target_index: int
    task: Task = Task.REGRESSION
    constant_features: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.x.shape[0] != self.split.total or self.y.shape[0] != self.split.total:
            raise ContractViolationError(
                f"{self.x.shape[0]} windows do not match split total {self.split.total}"
            )
        if self.x.ndim != 3 or self.x.shape[1] != self.length:
            raise ContractViolationError(f"Windows of shape {self.x.shape} are not L={self.length}")

    @classmethod
    def from_arrays(
        cls,
        x: Array,
        y: Array,
        split: Split,
        task: Union[Task, str] = Task.REGRESSION,
        feature_names: Optional[Tuple[str, ...]] = None,
    ) -> "WindowDataset":
        """Wrap pre-built ``n x L x d`` windows and targets without a normalizer."""
        x = np.asarray(x, dtype=DTYPE)
        names = feature_names or tuple(f"x{j}" for j in range(x.shape[2]))
        return cls(
            x=x,
            y=np.asarray(y, dtype=DTYPE),
            target_rows=np.arange(x.shape[1], x.shape[1] + x.shape[0]),
            length=int(x.shape[1]),
            split=split,
            normalizer=None,
            feature_names=names,
            target_index=0,
            task=Task(task),
        )

    @property
    def features(self) -> int:
        return int(self.x.shape[2])

    def _bounds(self, which: Partition) -> Tuple[int, int]:
        train_end = self.split.train
        valid_end = train_end + self.split.valid
        return {
            Partition.TRAIN: (0, train_end),
            Partition.VALID: (train_end, valid_end),
            Partition.TEST: (valid_end, self.split.total),
        }[Partition(which)]

    def partition(self, which: Union[Partition, str]) -> Windows:
        start, stop = self._bounds(Partition(which))
        return Windows(x=self.x[start:stop], y=self.y[start:stop])

    @property
    def train(self) -> Windows:
        return self.partition(Partition.TRAIN)

    @property
    def valid(self) -> Windows:
        return self.partition(Partition.VALID)

    @property
    def test(self) -> Windows:
        return self.partition(Partition.TEST)

    def window(self, k: int) -> Tuple[Array, float]:
        return self.x[k], float(self.y[k])

    def denormalize_target(self, values: Array) -> Array:
        """Map normalized targets or predictions back to sensor units."""
        if self.normalizer is None or self.task is Task.CLASSIFICATION:
            return np.asarray(values, dtype=DTYPE)
        return self.normalizer.denormalize(values, self.target_index)


def usable_windows(series: RawSeries, length: int) -> npt.NDArray[np.int64]:
    """Start rows of every window whose target row carries a recorded target."""
    if length < 1:
        raise ContractViolationError(f"Window length must be >= 1, got {length}")
    starts = np.arange(max(series.rows - length, 0))
    return starts[~series.target_missing[starts + length]]


def build_windows(
    series: RawSeries,
    length: int,
    splits: Split,
    task: Union[Task, str] = Task.REGRESSION,
    normalizer: Optional[Normalizer] = None,
) -> WindowDataset:
    """Slice ``series`` into ``length``-step windows predicting the next row's target.

    The most recent ``splits.total`` usable windows are kept: the last ``test`` form
    the test block, the ``valid`` before them the validation block and the ``train``
    before those the training block. The normalizer sees only rows up to the last
    training target, unless a fitted ``normalizer`` is passed in; a saved model is
    scored with the scaling it was trained under.

    Raises:
        ContractViolationError: ``length`` is below 1, or ``normalizer`` doesn't cover
                                every feature.
        InsufficientDataError: Fewer usable windows than ``splits.total``.
    """
    task = Task(task)
    if normalizer is not None and normalizer.minimum.shape != (series.features,):
        raise ContractViolationError(
            f"Normalizer covers {normalizer.minimum.size} features, the series has "
            f"{series.features}"
        )
    starts = usable_windows(series, length)
    if splits.total > len(starts):
        raise InsufficientDataError(
            required=splits.total + length + int(series.target_missing.sum()),
            available=series.rows,
        )

    chosen = starts[len(starts) - splits.total :]
    targets = chosen + length
    if normalizer is None:
        normalizer = fit_normalizer(series, int(targets[splits.train - 1]) + 1)
    scaled = normalizer.transform(series.values)

    x = scaled[chosen[:, None] + np.arange(length)]
    if task is Task.CLASSIFICATION:
        y = series.values[targets, series.target_index].copy()
    else:
        y = scaled[targets, series.target_index]

    constant = tuple(
        name for name, flag in zip(series.feature_names, normalizer.constant) if flag
    )
    logging.info(
        "Built %d windows of %d steps: %d train, %d valid, %d test",
        splits.total,
        length,
        splits.train,
        splits.valid,
        splits.test,
    )
    return WindowDataset(
        x=x,
        y=y,
        target_rows=targets,
        length=length,
        split=splits,
        normalizer=normalizer,
        feature_names=series.feature_names,
        target_index=series.target_index,
        task=task,
        constant_features=constant,
    )


def informative_lag_series(
    rng: Rng,
    rows: int,
    features: int = 2,
    coefficient: float = 0.9,
    noise: float = 0.05,
    lag: int = 1,
) -> RawSeries:
    """Synthetic series whose target depends on one driver ``lag`` rows back only.

    ``y[r] = coefficient * x0[r - lag] + noise * N(0, 1)``. A window of ``L`` steps
    ending at row ``r - 1`` holds that driver at step ``L - lag``; with
    ``lag = L - 1`` it is the second-oldest step. The target is the last feature.

    Raises:
        ContractViolationError: No driver column, or ``lag`` outside ``[1, rows)``.
    """
    if features < 2:
        raise ContractViolationError("Need at least one driver next to the target")
    _check_lag(lag, rows)
    drivers = rng.uniform((rows, features - 1))
    y = noise * rng.gaussian(rows)
    y[lag:] += coefficient * drivers[:-lag, 0]
    names = tuple(f"x{j}" for j in range(features - 1)) + ("y",)
    return RawSeries(
        feature_names=names,
        values=np.column_stack([drivers, y]),
        target_index=features - 1,
        target_missing=np.zeros(rows, dtype=bool),
    )


def informative_lag_classes(
    rng: Rng, rows: int, features: int = 2, classes: int = 2, lag: int = 1
) -> RawSeries:
    """Synthetic labels ``floor(classes * x0[r - lag])``; the label is the last feature."""
    if features < 2 or classes < 2:
        raise ContractViolationError("Need a driver, a label column and two classes")
    _check_lag(lag, rows)
    drivers = rng.uniform((rows, features - 1))
    labels = np.zeros(rows, dtype=DTYPE)
    labels[lag:] = np.minimum(np.floor(classes * drivers[:-lag, 0]), classes - 1)
    names = tuple(f"x{j}" for j in range(features - 1)) + ("label",)
    return RawSeries(
        feature_names=names,
        values=np.column_stack([drivers, labels]),
        target_index=features - 1,
        target_missing=np.zeros(rows, dtype=bool),
    )


def _check_lag(lag: int, rows: int) -> None:
    if not 1 <= lag < rows:
        raise ContractViolationError(f"lag must be in [1, {rows}), got {lag}")


def describe(dataset: WindowDataset) -> Dict[str, object]:
    """Summary statistics in the shape of a dataset table row."""
    return {
        "features": dataset.features,
        "window": dataset.length,
        "train": dataset.split.train,
        "valid": dataset.split.valid,
        "train_valid": dataset.split.train + dataset.split.valid,
        "test": dataset.split.test,
        "constant_features": list(dataset.constant_features),
        "first_target_row": int(dataset.target_rows[0]) if len(dataset.target_rows) else -1,
        "last_target_row": int(dataset.target_rows[-1]) if len(dataset.target_rows) else -1,
        "task": dataset.task.value,
        "valid_fraction": (
            dataset.split.valid / (dataset.split.train + dataset.split.valid)
            if dataset.split.train + dataset.split.valid
            else math.nan
        ),
    }
