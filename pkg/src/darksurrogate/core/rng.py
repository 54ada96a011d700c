"""
Named random streams on top of the Philox counter-based generator.

Every stochastic routine in the package takes an explicit :class:`Rng`.
A stream is identified by ``(seed, stream)``; the 128-bit Philox key is
derived from both with BLAKE2b, so the same pair yields the same value
sequence on every platform and distinct stream names give independent
sequences. There is no global generator.
"""

import hashlib

import numpy as np
import torch

MASK64 = (1 << 64) - 1


def _philox_key(seed, stream):
    digest = hashlib.blake2b(
        seed.to_bytes(8, "little") + stream.encode("utf-8"), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """A reproducible random stream identified by a 64-bit seed and a name."""

    def __init__(self, seed, stream="root"):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed) & MASK64
        self.stream = str(stream)
        self._gen = np.random.Generator(np.random.Philox(key=_philox_key(self.seed, self.stream)))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    def child(self, name):
        """Derive an independent sub-stream; does not consume from this one."""
        return Rng(self.seed, f"{self.stream}/{name}")

    @property
    def numpy(self):
        return self._gen

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def beta(self, a, b, size=None):
        return self._gen.beta(a, b, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def torch_generator(self):
        """A CPU ``torch.Generator`` seeded from the next draw of this stream."""
        g = torch.Generator()
        g.manual_seed(int(self._gen.integers(0, 2**63 - 1)))
        return g
