"""Seeded random streams.

All randomness in the package is drawn from :class:`RngStream` objects. A
stream is a PCG64 generator plus a draw counter; child streams are derived
from a root seed and a text label so independent consumers (shuffling,
dropout, initialization, label subsampling) never share draws.
"""

from __future__ import annotations

import json
import zlib

import numpy as np


class RngStream:
    def __init__(self, seed, label=None):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.label = label
        entropy = [self.seed]
        if label is not None:
            entropy.append(zlib.crc32(label.encode("utf-8")))
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        self.counter = 0

    def spawn(self, label):
        """Child stream keyed by this stream's seed and ``label``; does not advance this stream."""
        full = label if self.label is None else f"{self.label}/{label}"
        return RngStream(self.seed, full)

    # draws -------------------------------------------------------------------

    def random(self, shape=None):
        self.counter += 1
        return self._gen.random(shape)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.counter += 1
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        self.counter += 1
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        self.counter += 1
        return self._gen.choice(a, size=size, replace=replace)

    # persistence ---------------------------------------------------------------

    def get_state(self):
        return {"seed": self.seed, "label": self.label, "counter": self.counter,
                "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state):
        self.seed = state["seed"]
        self.label = state["label"]
        self.counter = state["counter"]
        self._gen.bit_generator.state = state["bit_generator"]

    def to_json(self):
        return json.dumps(self.get_state(), sort_keys=True)

    @classmethod
    def from_state(cls, state):
        if isinstance(state, str):
            state = json.loads(state)
        stream = cls(state["seed"], state["label"])
        stream.set_state(state)
        return stream

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"
