"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper around NumPy's
Philox-4x64 counter-based bit generator. The key is derived from the 64-bit
seed (plus optional integer path components) through ``SeedSequence``, so a
stream for ``(seed, 17)`` never depends on how many draws were taken from
``(seed, 16)``. Sub-streams are how training stays reproducible across
resume: iteration ``i`` always uses ``Rng(seed).child(i)``.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence([self.seed, *self.path])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *index: int) -> "Rng":
        """Independent stream addressed by ``index`` below this one."""
        return Rng(self.seed, self.path + tuple(index))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape, dtype=np.float64) * std).astype(np.float32)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
