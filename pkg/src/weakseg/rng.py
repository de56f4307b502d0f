"""SplitMix64 streams for reproducible data generation.

Every synthetic sample draws from its own stream whose seed is derived from
the master seed and the sample's coordinates, so any sample can be rebuilt
in isolation.
"""

from __future__ import annotations

import numpy as np

from . import kernels

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 output finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential SplitMix64 generator.

    ``next_u64`` matches the reference algorithm: add the golden gamma to the
    state, then mix. Block draws advance the state by the number of outputs.
    """

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.seed + self.counter * GOLDEN_GAMMA)

    def u64(self, count: int) -> np.ndarray:
        out = kernels.splitmix64_block(self.seed, self.counter, count)
        self.counter += count
        return out

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.u64(count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, count: int) -> np.ndarray:
        """Box-Muller normals; consumes ``2 * ceil(count / 2)`` outputs."""
        half = (count + 1) // 2
        u = self.uniform(2 * half)
        u1 = 1.0 - u[:half]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[half:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]


_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


def derive_seed(master: int, *parts) -> int:
    """Hash a master seed with integer or split-name coordinates into a new 64-bit seed."""
    z = mix64(master)
    for p in parts:
        code = _SPLIT_CODES[p] if isinstance(p, str) else int(p)
        z = mix64(z ^ mix64(code + GOLDEN_GAMMA))
    return z
