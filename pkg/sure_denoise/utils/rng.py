"""Seeded random streams.

Every stream is a numpy ``Generator`` over ``PCG64`` seeded through ``SeedSequence``
with the master seed as entropy and a spawn key built from the stream id (plus any
extra integers such as the epoch). PCG64 and ``SeedSequence`` produce the same
bit stream on every platform numpy supports.
"""

import numpy as np

STREAMS = {
    'root': 0,
    'corrupt': 1,
    'probe': 2,
    'sigma': 3,
    'shuffle': 4,
    'init': 5,
    'synthetic': 6,
    'patches': 7,
    'oracle': 8,
    'validation': 9,
    'subset': 10,
}


class Rng:
    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def substream(self, name, *extra):
        """Derive an independent stream from (master seed, this key, stream id, extra)."""
        if name not in STREAMS:
            raise KeyError(f'unknown random stream {name!r}')
        return Rng(self.seed, self.key + (STREAMS[name],) + tuple(extra))

    def normal(self, shape):
        return self.generator.standard_normal(tuple(shape))

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size)

    def poisson(self, lam):
        return self.generator.poisson(lam)

    def rademacher(self, shape):
        return self.generator.integers(0, 2, tuple(shape)).astype(np.float64) * 2.0 - 1.0

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f'Rng(seed={self.seed}, key={self.key})'
