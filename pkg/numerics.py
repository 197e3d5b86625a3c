"""
Dense float64 kernels and seeded randomness used by every other module.

Matrices are plain ``numpy.ndarray`` values of dtype float64. Randomness comes
from ``numpy.random.Generator`` (PCG64); child generators are derived from a
global seed with :func:`derive_seed`, so the result of an experiment never
depends on how its items are scheduled.
"""

import hashlib
import logging
from typing import Sequence, Union

import numpy as np

from errors import RangeError, ShapeError

logger = logging.getLogger(__name__)

Matrix = np.ndarray
RandomSource = np.random.Generator

DTYPE = np.float64


def as_matrix(data: Union[Sequence[Sequence[float]], np.ndarray]) -> Matrix:
    """Build a finite float64 matrix, rejecting ragged or non-finite input."""
    try:
        matrix = np.array(data, dtype=DTYPE)
    except ValueError as e:
        raise ShapeError(f"Cannot build matrix: {e}") from e
    if matrix.ndim != 2:
        raise ShapeError(f"Expected a 2-d matrix, got {matrix.ndim} dimension(s)")
    ensure_finite(matrix, "matrix")
    return matrix


def ensure_finite(array: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise RangeError(f"{name} contains NaN or Inf")
    return array


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """
    Softmax over the last axis of ``m * scale``.

    The row maximum is subtracted before exponentiation. Entries equal to
    ``-inf`` (causal masks) come out as exact zeros.
    """
    if scale <= 0:
        raise RangeError(f"softmax scale must be positive, got {scale}")
    z = m * scale
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(v: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """gain * (v - mean) / sqrt(var + eps) + bias over the last axis."""
    if eps <= 0:
        raise RangeError(f"layer_norm eps must be positive, got {eps}")
    if v.shape[-1] != gain.shape[-1] or v.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm length mismatch: v={v.shape[-1]}, gain={gain.shape[-1]}, bias={bias.shape[-1]}"
        )
    mean = np.mean(v, axis=-1, keepdims=True)
    var = np.var(v, axis=-1, keepdims=True)
    return gain * (v - mean) / np.sqrt(var + eps) + bias


def derive_seed(global_seed: int, label: str, index: int = 0) -> int:
    """64-bit child seed from sha256(global seed, purpose label, item index)."""
    digest = hashlib.sha256(f"{int(global_seed)}:{label}:{int(index)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, label: str = "", index: int = 0) -> RandomSource:
    """A fresh generator; with a label the seed is first passed through derive_seed."""
    if label:
        seed = derive_seed(seed, label, index)
    return np.random.Generator(np.random.PCG64(seed))


def discrete_uniform(rng: RandomSource, lo: int, hi: int) -> int:
    """
    Uniform integer in [lo, hi] inclusive.

    A degenerate range returns ``lo`` without consuming randomness, which is
    what makes neutral defense settings reproduce the static model.
    """
    if lo > hi:
        raise RangeError(f"discrete_uniform needs lo <= hi, got [{lo}, {hi}]")
    if lo == hi:
        return int(lo)
    return int(rng.integers(lo, hi, endpoint=True))


def gaussian(rng: RandomSource, sigma: float, n: Union[int, tuple]) -> np.ndarray:
    """n independent N(0, sigma^2) draws; sigma scales a standard-normal draw."""
    if sigma < 0:
        raise RangeError(f"gaussian sigma must be non-negative, got {sigma}")
    return sigma * rng.standard_normal(n)
