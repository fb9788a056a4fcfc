"""Minimal dense-tensor arithmetic, deterministic RNG, and width-checked integer ops.

Float tensors are plain float32 numpy arrays. Integer tensors carry a logical
bit-width so every op can check its codes stay in range. All rounding in the
package uses a single rule: round-half-toward-+inf, i.e. floor(x + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def round_half_up(x: float) -> int:
    """floor(x + 0.5); the single tie-breaking rule used everywhere."""
    if not abs(x) < 2**31:
        raise OverflowError(f"round_half_up input out of 32-bit range: {x}")
    r = math.floor(x + 0.5)
    if not INT32_MIN <= r <= INT32_MAX:
        raise OverflowError(f"round_half_up result out of 32-bit range: {r}")
    return r


def round_half_up_array(x) -> np.ndarray:
    """Vectorized floor(x + 0.5) as int64."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def shift_round(x: int, k: int) -> int:
    """Shift-based scaling by 2**k.

    k >= 0 is an exact left shift; k < 0 adds 2**(|k|-1) then arithmetic
    right shifts, which matches round_half_up(x / 2**|k|).
    """
    x = int(x)
    if k >= 0:
        r = x << k
        if not INT32_MIN <= r <= INT32_MAX:
            raise OverflowError(f"shift_round overflow: {x} << {k}")
        return r
    k = -k
    return (x + (1 << (k - 1))) >> k


def shift_round_array(x, k) -> np.ndarray:
    """Vectorized shift_round; k may be a scalar or an array broadcastable to x.

    Works in int64; callers are responsible for keeping accumulators in
    32-bit range (checked by IntTensor construction downstream).
    """
    x = np.asarray(x, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    left = np.where(k > 0, k, 0)
    right = np.where(k < 0, -k, 0)
    bias = np.where(right > 0, np.int64(1) << np.maximum(right - 1, 0), 0)
    return ((x + bias) >> right) << left


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product, float64 accumulation, float32 result."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)


def int_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


def clip_codes(x, bits: int, signed: bool) -> np.ndarray:
    lo, hi = int_range(bits, signed)
    return np.clip(np.asarray(x, dtype=np.int64), lo, hi)


@dataclass
class IntTensor:
    """Dense integer tensor with a logical bit-width.

    data is stored as int64 for headroom; every element must lie inside the
    logical [lo, hi] range implied by (bits, signed).
    """

    data: np.ndarray
    bits: int
    signed: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if not 2 <= self.bits <= 32:
            raise ValueError(f"bits must be in [2, 32], got {self.bits}")
        lo, hi = int_range(self.bits, self.signed)
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise ValueError(
                f"codes out of range for {'' if self.signed else 'u'}int{self.bits}: "
                f"[{self.data.min()}, {self.data.max()}] vs [{lo}, {hi}]"
            )

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Rng:
    """Deterministic, splittable PRNG.

    PCG64 seeded through a numpy SeedSequence; split() spawns independent
    child streams, so the same seed gives the same streams on every platform
    as long as the split order is unchanged.
    """

    seed: int
    _ss: np.random.SeedSequence | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._ss is None:
            self._ss = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._ss))

    algorithm = "pcg64+seedsequence"

    def split(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, _ss=child) for child in self._ss.spawn(n)]

    def normal(self, shape=(), mean=0.0, sigma=1.0) -> np.ndarray:
        return self._gen.normal(mean, sigma, size=shape)

    def uniform(self, shape=(), lo=0.0, hi=1.0) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def integers(self, lo, hi, shape=()) -> np.ndarray:
        """Integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=shape)

    def rademacher(self, shape=()) -> np.ndarray:
        return self._gen.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def random(self) -> float:
        return float(self._gen.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
