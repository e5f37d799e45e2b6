"""Portable seeded random numbers built on PCG32 (XSH-RR 64/32).

Bulk draws are vectorised by jumping the underlying LCG ahead, so an array
of ``n`` outputs is bit-identical to ``n`` sequential calls.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1
_DEFAULT_STREAM = 0xDA3E39CB94B95BDB


def _affine_power(n: int, inc: int) -> tuple[int, int]:
    """Coefficients (a, c) with state_{k+n} = a * state_k + c (mod 2**64)."""
    acc_mult, acc_plus = 1, 0
    cur_mult, cur_plus = _MULT, inc
    while n > 0:
        if n & 1:
            acc_mult = (acc_mult * cur_mult) & _MASK64
            acc_plus = (acc_plus * cur_mult + cur_plus) & _MASK64
        cur_plus = ((cur_mult + 1) * cur_plus) & _MASK64
        cur_mult = (cur_mult * cur_mult) & _MASK64
        n >>= 1
    return acc_mult, acc_plus


def _stream_id(parent: int, name: str) -> int:
    digest = hashlib.blake2b(
        name.encode("utf-8"), digest_size=8, key=parent.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest, "little") >> 1


class Rng:
    """PCG32 generator with named, independent sub-streams.

    ``Rng(seed, stream)`` follows the reference ``pcg32_srandom`` seeding, so
    ``Rng(42, 54).next_u32(6)`` reproduces the published demo sequence.
    """

    def __init__(self, seed: int, stream: int = _DEFAULT_STREAM):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & (_MASK64 >> 1)
        self.inc = ((self.stream << 1) | 1) & _MASK64
        self.state = 0
        self._advance(1)
        self.state = (self.state + self.seed) & _MASK64
        self._advance(1)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream:#x})"

    def spawn(self, name: str) -> "Rng":
        """Child generator keyed by ``name``; does not consume parent draws."""
        return Rng(self.seed, _stream_id(self.stream, name))

    def _advance(self, n: int) -> None:
        a, c = _affine_power(n, self.inc)
        self.state = (a * self.state + c) & _MASK64

    def _states(self, n: int) -> np.ndarray:
        states = np.empty(n, dtype=np.uint64)
        states[0] = self.state
        filled = 1
        with np.errstate(over="ignore"):
            while filled < n:
                take = min(filled, n - filled)
                a, c = _affine_power(filled, self.inc)
                states[filled : filled + take] = states[:take] * np.uint64(a) + np.uint64(c)
                filled += take
        self._advance(n)
        return states

    def next_u32(self, n: int | None = None):
        """Raw 32-bit outputs; a scalar ``int`` when ``n`` is None."""
        count = 1 if n is None else int(n)
        if count == 0:
            return np.empty(0, dtype=np.uint32)
        old = self._states(count)
        xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & np.uint64(0xFFFFFFFF)
        rot = old >> np.uint64(59)
        left = (-rot.astype(np.int64)) & 31
        out = ((xorshifted >> rot) | (xorshifted << left.astype(np.uint64))) & np.uint64(0xFFFFFFFF)
        out = out.astype(np.uint32)
        return int(out[0]) if n is None else out

    def uniform(self, n: int | None = None):
        """Float64 in [0, 1) with 53 random bits (two draws per value)."""
        count = 1 if n is None else int(n)
        raw = self.next_u32(2 * count).astype(np.uint64).reshape(count, 2)
        hi = (raw[:, 0] >> np.uint64(5)).astype(np.float64)
        lo = (raw[:, 1] >> np.uint64(6)).astype(np.float64)
        out = (hi * 67108864.0 + lo) / 9007199254740992.0
        return float(out[0]) if n is None else out

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws (Box-Muller), float64."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = math.prod(shape)
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).reshape(-1)
        return z[:count].reshape(shape)

    def angles(self, n: int) -> np.ndarray:
        """Rotation angles in degrees, uniform on (-180, 180]."""
        return 180.0 - 360.0 * self.uniform(n)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
