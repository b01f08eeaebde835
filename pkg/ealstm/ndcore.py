# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Dense float64 matrices, activations and the seedable generator behind every
stochastic step of the package."""

from __future__ import absolute_import

from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from .exceptions import ContractViolationError, NonFiniteError

Matrix = npt.NDArray[np.float64]
ArrayLike = Union[Matrix, Sequence[float], Sequence[Sequence[float]], float]

DTYPE = np.float64


def matrix(data: Any, rows: Optional[int] = None, cols: Optional[int] = None) -> Matrix:
    """Build a read-only row-major float64 matrix.

    Args:
        data: Nested rows, or a flat row-major sequence when ``rows`` and ``cols``
              are given.
        rows: The row count for flat data.
        cols: The column count for flat data.

    Raises:
        ContractViolationError: The data length doesn't equal ``rows * cols`` or the
                                result isn't two-dimensional.
        NonFiniteError: An entry is NaN or infinite.
    """
    arr = np.array(data, dtype=DTYPE, order="C")
    if rows is not None or cols is not None:
        if rows is None or cols is None or arr.size != rows * cols:
            raise ContractViolationError(
                f"Data of length {arr.size} does not fill a {rows}x{cols} matrix"
            )
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ContractViolationError(f"A matrix needs 2 dimensions, got {arr.ndim}")
    return freeze(arr)


def freeze(arr: npt.NDArray[Any]) -> Matrix:
    """Return a read-only, C-contiguous float64 version of ``arr``.

    The caller's array keeps its write flag; only the returned view is locked.
    """
    out = np.ascontiguousarray(arr, dtype=DTYPE)
    if out is arr:
        out = out.view()
    if not np.isfinite(out).all():
        raise NonFiniteError("Matrix holds non-finite entries")
    out.setflags(write=False)
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Multiply two matrices.

    Raises:
        ContractViolationError: ``a.cols != b.rows``.
        NonFiniteError: The product overflowed.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolationError(
            f"Cannot multiply {a.shape} by {b.shape}: inner dimensions differ"
        )
    return freeze(a @ b)


def sigmoid(x: ArrayLike) -> Any:
    """Logistic function ``1 / (1 + exp(-x))``, saturating at the extremes."""
    out = expit(x)
    if np.ndim(out) == 0:
        return float(out)
    return out


def tanh(x: ArrayLike) -> Any:
    out = np.tanh(x)
    if np.ndim(out) == 0:
        return float(out)
    return out


def softmax(logits: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Row-wise softmax over the last axis."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


class Rng:
    """Seedable deterministic generator.

    Identical seeds give identical streams. Children for parallel consumers are
    derived from ``(seed, key)`` with :meth:`spawn`, never from scheduling order.

    Args:
        seed: A non-negative 64-bit seed.
        spawn_key: The derivation path from the root seed, empty for roots.
    """

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()) -> None:
        if seed < 0 or seed >= 2 ** 64:
            raise ContractViolationError(f"Seed must be an unsigned 64-bit value, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, *key: int) -> "Rng":
        """Derive an independent child generator keyed by ``key``."""
        return Rng(self.seed, self.spawn_key + tuple(key))

    def uniform(self, size: Optional[Any] = None) -> Any:
        """Uniform floats in [0, 1)."""
        return self._gen.random(size)

    def integer(self, n: int, size: Optional[Any] = None) -> Any:
        """Uniform integers in [0, n)."""
        if n < 1:
            raise ContractViolationError(f"Integer range must be positive, got {n}")
        out = self._gen.integers(0, n, size=size)
        return int(out) if size is None else out

    def bernoulli(self, p: float, size: Optional[Any] = None) -> Any:
        out = self._gen.random(size) < p
        return bool(out) if size is None else out

    def gaussian(self, size: Optional[Any] = None) -> Any:
        """Standard normal draws."""
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._gen.permutation(n)

    def derive_seed(self, *key: int) -> int:
        """A 64-bit seed for the child keyed by ``key``, for APIs that take integers."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key + tuple(key))
        return int(seq.generate_state(1, dtype=np.uint64)[0])

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"


def gauss_init(rng: Rng, rows: int, cols: int, scale: float) -> Matrix:
    """Draw a ``rows x cols`` matrix with i.i.d. Gaussian(0, scale^2) entries.

    Raises:
        ContractViolationError: ``scale`` is not positive.
    """
    if not scale > 0:
        raise ContractViolationError(f"Initialization scale must be positive, got {scale}")
    return freeze(rng.gaussian((rows, cols)) * scale)
