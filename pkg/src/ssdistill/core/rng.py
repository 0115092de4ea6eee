"""Counter-based random number generation.

All sampling in the package flows through RngState, a (seed, counter) pair
over a splitmix64 stream. Draws are pure functions of the state, the state
advances by an explicit number of raw 64-bit words, and a state can be
serialized and restored exactly, which is what makes checkpoint resume
bit-identical. No use of numpy's global RNG anywhere.

Floating-point draws are computed in float64 from the high 53 bits of each
word, so sequences are stable across platforms and numpy versions.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; z is uint64 ndarray, wraps mod 2^64 by construction
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class RngState:
    """Splittable counter RNG. Instances are mutable; draws advance `counter`.

    The word at counter c is mix(seed + (c+1)*GOLDEN). Two states with the
    same (seed, counter) always produce the same draws in the same order.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        if not (0 <= seed <= _U64_MASK):
            raise ContractError(f"rng seed must fit in uint64, got {seed}")
        if counter < 0:
            raise ContractError(f"rng counter must be >= 0, got {counter}")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, d: dict) -> "RngState":
        return cls(int(d["seed"]), int(d["counter"]))

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)

    # -- raw words ---------------------------------------------------------

    def _words(self, n: int) -> np.ndarray:
        if n < 0:
            raise ContractError(f"cannot draw {n} words")
        ctr = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(np.uint64(self.seed) + ctr * _GOLDEN)

    def next_u64(self) -> int:
        return int(self._words(1)[0])

    def split(self) -> "RngState":
        """Derive an independent child stream; advances this state by one word."""
        return RngState(self.next_u64())

    # -- distributions -----------------------------------------------------

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniform draws in [lo, hi), float64."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = lo + (hi - lo) * u
        return out.reshape(shape) if shape else np.float64(out[0])

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller, float64."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        w = self._words(2 * pairs)
        # u1 in (0, 1] so log() is finite; u2 in [0, 1)
        u1 = ((w[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (w[pairs:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n]
        out = mean + std * z
        return out.reshape(shape) if shape else np.float64(out[0])

    def randint(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi). The tiny floor-based modulo bias is
        accepted in exchange for a platform-stable single-word draw."""
        if hi <= lo:
            raise ContractError(f"randint needs lo < hi, got [{lo}, {hi})")
        u = (self.next_u64() >> 11) * _INV_2_53
        return lo + int(u * (hi - lo))

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n) via stable argsort of uniform keys."""
        if n < 0:
            raise ContractError(f"permutation size must be >= 0, got {n}")
        keys = self.uniform((n,))
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order given by the permutation."""
        if not 0 <= k <= n:
            raise ContractError(f"choice needs 0 <= k <= n, got k={k}, n={n}")
        return self.permutation(n)[:k]

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"bernoulli p must lie in [0, 1], got {p}")
        return self.uniform(_as_shape(shape)) < p


def _as_shape(shape) -> tuple:
    if isinstance(shape, int):
        return (shape,)
    return tuple(int(s) for s in shape)
