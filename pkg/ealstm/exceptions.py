# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

from __future__ import absolute_import

from typing import Optional


class EaLstmError(Exception):
    """Base class for all *ealstm* errors."""

    pass


class ContractViolationError(EaLstmError):
    """Raised if an operation is called with inputs that break its contract.

    Args:
        msg: The exception message.
    """

    def __init__(self, msg: Optional[str] = None) -> None:
        if msg is None:
            msg = "An operation was called with inconsistent shapes or arguments"
        super().__init__(msg)


class NonFiniteError(EaLstmError):
    """Raised if a NaN or infinity shows up in a computation.

    Args:
        msg: The exception message.
        time_step: The recurrence step at which the value appeared, if known.
    """

    def __init__(self, msg: Optional[str] = None, time_step: Optional[int] = None) -> None:
        if msg is None:
            msg = "A non-finite value was produced"
            if time_step is not None:
                msg = f"{msg} at time step {time_step}"
        super().__init__(msg)
        self.time_step = time_step


class DataError(EaLstmError):
    """Base class for all dataset errors."""

    pass


class ParseError(DataError):
    """Raised if a row of an input file cannot be parsed.

    Args:
        msg: The exception message.
        line: The 1-based line number in the input file.
    """

    def __init__(self, msg: Optional[str] = None, line: Optional[int] = None) -> None:
        if msg is None:
            msg = "Unparseable row"
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


class UnknownSchemaError(DataError):
    """Raised if a dataset id has no registered schema.

    Args:
        schema: The unknown dataset id.
    """

    def __init__(self, schema: str) -> None:
        super().__init__(f"Unknown dataset schema: '{schema}'")
        self.schema = schema


class InsufficientDataError(DataError):
    """Raised if a series is too short for the requested windows and splits.

    Args:
        required: The minimum number of rows needed.
        available: The number of rows present.
    """

    def __init__(self, required: int, available: int) -> None:
        super().__init__(
            f"Insufficient rows: at least {required} usable rows are required, "
            f"{available} available"
        )
        self.required = required
        self.available = available


class DivergenceError(EaLstmError):
    """Raised if training produces a non-finite validation loss.

    Args:
        last_finite_epoch: The last epoch with a finite validation loss, or -1.
        msg: The exception message.
    """

    def __init__(self, last_finite_epoch: int, msg: Optional[str] = None) -> None:
        if msg is None:
            msg = f"Training diverged; last finite epoch was {last_finite_epoch}"
        super().__init__(msg)
        self.last_finite_epoch = last_finite_epoch


class EvolutionError(EaLstmError):
    """Raised if every fitness evaluation of a generation diverged."""

    pass


class ConfigError(EaLstmError):
    """Raised if a run configuration is malformed or invalid.

    Args:
        msg: The exception message.
        line: The 1-based line number in the config file, if any.
    """

    def __init__(self, msg: Optional[str] = None, line: Optional[int] = None) -> None:
        if msg is None:
            msg = "Invalid configuration"
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


class StageError(EaLstmError):
    """Raised by the harness to tag a failure with the run stage it happened in.

    Args:
        stage: The run stage, e.g. ``data`` or ``evolve``.
        cause: The underlying error.
    """

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class CheckpointError(EaLstmError):
    """Raised if a checkpoint file is unreadable or has an unsupported format version.

    Args:
        msg: The exception message.
    """

    def __init__(self, msg: Optional[str] = None) -> None:
        if msg is None:
            msg = "Invalid model checkpoint"
        super().__init__(msg)


class DuplicateRouteError(EaLstmError):
    """Raised if a user-supplied monitor route clashes with a built-in one."""

    pass
