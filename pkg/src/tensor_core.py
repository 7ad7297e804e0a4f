#!/usr/bin/env python3
"""
HierLoc tensor core
Dense float64 matrix kernels and seeded random streams shared by every module
"""

import zlib
import logging
from typing import Iterable, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Matrices are plain 2-D float64 numpy arrays, row-major
Matrix = np.ndarray
DTYPE = np.float64


class HierLocError(Exception):
    """Base class for every error raised by the localization engine"""


class ShapeError(HierLocError, ValueError):
    pass


class InitError(HierLocError, ValueError):
    pass


def shape_str(shape: Tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape)


def as_matrix(values: Union[Iterable, np.ndarray], name: str = "matrix") -> Matrix:
    """Coerce values into a 2-D C-contiguous float64 array"""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with an explicit shape check"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {shape_str(a.shape)} by {shape_str(b.shape)}: "
            f"inner dimensions differ"
        )
    return a @ b


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=DTYPE)


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=DTYPE)


def assert_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise HierLocError(f"{name} contains NaN or Inf")


class SeededRng:
    """Deterministic random stream; identical seed gives an identical stream"""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise InitError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, stream: str) -> "SeededRng":
        """Independent stream keyed by (seed, name)"""
        derived = np.random.SeedSequence([self.seed, zlib.crc32(stream.encode("utf-8"))])
        return SeededRng(int(derived.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, low: float, high: float, shape: Tuple[int, ...]) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def random(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self.generator.random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform_init(fan_in: int, fan_out: int, rng: SeededRng) -> Matrix:
    """fan_in x fan_out matrix, entries uniform on [-L, L] with L = sqrt(6/(fan_in+fan_out))"""
    if fan_in < 1 or fan_out < 1:
        raise InitError(f"fan_in and fan_out must be >= 1, got {fan_in} and {fan_out}")
    limit = glorot_limit(fan_in, fan_out)
    return np.ascontiguousarray(rng.uniform(-limit, limit, (fan_in, fan_out)), dtype=DTYPE)
