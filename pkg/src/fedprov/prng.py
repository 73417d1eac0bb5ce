"""Counter-mode splitmix64 generator.

Output ``i`` (0-based) of a stream seeded with ``s`` is ``mix(s + (i + 1) * GAMMA)``
with all arithmetic modulo 2**64, so blocks of draws vectorize over numpy
``uint64`` arrays and any position can be computed without the ones before it.
Floats take the top 53 bits: ``(x >> 11) * 2**-53``, uniform on [0, 1).
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB

# stream tags used by model-core; frozen, see FORMAT.md
TAG_DATA_INPUTS = 1
TAG_DATA_MAP = 2
TAG_DATA_NOISE = 3
TAG_MODEL_INIT = 4


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """One step of the classic sequential splitmix64; returns (output, new_state)."""
    state = (state + GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31), state


def derive_seed(seed: int, tag: int) -> int:
    """Independent sub-seed for a named purpose."""
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    out, _ = splitmix64_scalar(seed ^ ((tag * GAMMA) & MASK64))
    return out


class SplitMix64:
    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.position = 0

    def uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.position + 1, self.position + 1 + n, dtype=np.uint64)
        self.position += n
        z = np.uint64(self.seed) + idx * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.uint64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def symmetric(self, n: int, bound: float) -> np.ndarray:
        """``n`` doubles uniform on [-bound, bound)."""
        return (2.0 * self.uniform(n) - 1.0) * bound
