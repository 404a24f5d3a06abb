"""Seed-derived random streams.

Every run is identified by one 64-bit seed. Each worker ``i`` owns its own
counter-based Philox stream keyed by ``(seed, 0, i)``; step ``n`` consumes
the ``n``-th block of ``N`` draws from it. Adding or removing workers never
changes another worker's draws, and a batch of seeds produces exactly the
draws each seed would produce alone.
"""

from __future__ import annotations

import enum

import numpy as np

NOISE_KEY = 0
INIT_ROW_KEY = 1
INIT_POINT_KEY = 2


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    NONE = "none"


def substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def unit_noise(kind: NoiseKind, gen: np.random.Generator, shape) -> np.ndarray:
    """Zero-mean, unit-scale draws: standard normal or uniform random signs.

    Both draw one 64-bit word per value, so splitting a request into chunks
    yields the same sequence.
    """
    kind = NoiseKind(kind)
    if kind is NoiseKind.GAUSSIAN:
        return gen.standard_normal(shape)
    if kind is NoiseKind.RADEMACHER:
        return np.where(gen.random(shape) < 0.5, 1.0, -1.0)
    return np.zeros(shape)


def derive_seeds(master_seed: int, cell: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(cell),))
    return [int(s) for s in ss.generate_state(count, dtype=np.uint64)]


class NoiseStreams:
    """Per-(seed, worker) noise generators with chunked buffering.

    ``next()`` returns an array of shape ``(S, m, N)`` of unit-scale noise
    for the next iteration, S being the number of seeds.
    """

    def __init__(self, seeds, m, dim, kind, chunk=256):
        self.seeds = [int(s) for s in seeds]
        self.m = int(m)
        self.dim = int(dim)
        self.kind = NoiseKind(kind)
        self.chunk = int(chunk)
        self._gens = None
        if self.kind is not NoiseKind.NONE:
            self._gens = [[substream(s, NOISE_KEY, i) for i in range(self.m)]
                          for s in self.seeds]
        self._buf = None
        self._pos = 0

    def _refill(self):
        S = len(self.seeds)
        buf = np.empty((self.chunk, S, self.m, self.dim))
        for s, gens in enumerate(self._gens):
            for i, gen in enumerate(gens):
                buf[:, s, i, :] = unit_noise(self.kind, gen, (self.chunk, self.dim))
        self._buf = buf
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.kind is NoiseKind.NONE:
            return np.zeros((len(self.seeds), self.m, self.dim))
        if self._buf is None or self._pos == self.chunk:
            self._refill()
        out = self._buf[self._pos]
        self._pos += 1
        return out
