"""Seeded synthetic datasets small enough for desk-scale experiments.

``sinusoid-mix``
    Each channel sums three sinusoids with integer periods drawn from
    ``PERIODS`` plus Gaussian noise. With ``sigma=0`` every channel repeats
    exactly with the lcm of its periods.
``ar-process``
    Per channel ``x_t = phi * x_{t-1} + e_t`` with ``e_t ~ N(0, 1)`` and
    ``phi = 0.8`` by default, plus a sinusoid of period ``period`` (24) and
    amplitude ``amplitude`` (1.0) and optional observation noise ``sigma``.
``class-frequency``
    ``N`` windows of length ``T``; class ``k`` is a sinusoid completing
    ``base_cycles * (k + 1)`` cycles per window, with a random phase and an
    amplitude in [0.8, 1.2], plus noise ``sigma``. Classes are balanced.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import RngStream
from .data import TimeSeriesDataset
from .errors import InvalidSpec

GENERATORS = ("sinusoid-mix", "ar-process", "class-frequency")
PERIODS = (6, 8, 12, 16, 24, 32)


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str = "sinusoid-mix"
    T_total: int = 2000
    N: int = 400
    T: int = 64
    C: int = 1
    K: int = 2
    sigma: float = 0.1
    seed: int = 0
    phi: float = 0.8
    period: int = 24
    amplitude: float = 1.0
    base_cycles: int = 2

    def validate(self):
        if self.generator not in GENERATORS:
            raise InvalidSpec(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.C < 1 or self.T_total < 2 or self.N < 1 or self.T < 2:
            raise InvalidSpec("C, N, T and T_total must be positive (T, T_total >= 2)")
        if self.sigma < 0:
            raise InvalidSpec(f"sigma must be >= 0, got {self.sigma}")
        if self.generator == "class-frequency":
            if self.K < 2:
                raise InvalidSpec("class-frequency needs K >= 2")
            if self.base_cycles * self.K * 2 >= self.T:
                raise InvalidSpec("highest class frequency must stay below Nyquist (2 * base_cycles * K < T)")
        if self.generator == "ar-process" and not abs(self.phi) < 1:
            raise InvalidSpec(f"AR coefficient must satisfy |phi| < 1, got {self.phi}")
        if self.period < 1:
            raise InvalidSpec("period must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)


def _sinusoid_mix(spec, rng):
    t = np.arange(spec.T_total, dtype=np.float64)
    out = np.zeros((spec.T_total, spec.C))
    for c in range(spec.C):
        periods = rng.choice(np.asarray(PERIODS), size=3, replace=False)
        amps = rng.uniform(0.5, 1.5, size=3)
        phases = rng.uniform(0.0, 2 * math.pi, size=3)
        for p, a, ph in zip(periods, amps, phases):
            out[:, c] += a * np.sin(2 * math.pi * t / p + ph)
    if spec.sigma:
        out += rng.normal(0.0, spec.sigma, out.shape)
    return TimeSeriesDataset(out, frequency_note="synthetic sinusoid-mix")


def _ar_process(spec, rng):
    e = rng.normal(0.0, 1.0, (spec.T_total, spec.C))
    x = np.zeros_like(e)
    x[0] = e[0] / math.sqrt(1 - spec.phi ** 2)
    for i in range(1, spec.T_total):
        x[i] = spec.phi * x[i - 1] + e[i]
    phases = rng.uniform(0.0, 2 * math.pi, spec.C)
    t = np.arange(spec.T_total, dtype=np.float64)[:, None]
    x += spec.amplitude * np.sin(2 * math.pi * t / spec.period + phases)
    if spec.sigma:
        x += rng.normal(0.0, spec.sigma, x.shape)
    return TimeSeriesDataset(x, frequency_note=f"synthetic AR(1) phi={spec.phi} + period {spec.period}")


def _class_frequency(spec, rng):
    labels = np.arange(spec.N) % spec.K
    labels = labels[rng.permutation(spec.N)]
    t = np.arange(spec.T, dtype=np.float64)
    X = np.empty((spec.N, spec.T, spec.C))
    phases = rng.uniform(0.0, 2 * math.pi, (spec.N, spec.C))
    amps = rng.uniform(0.8, 1.2, (spec.N, spec.C))
    for i, k in enumerate(labels):
        cycles = spec.base_cycles * (k + 1)
        X[i] = amps[i] * np.sin(2 * math.pi * cycles * t[:, None] / spec.T + phases[i])
    if spec.sigma:
        X += rng.normal(0.0, spec.sigma, X.shape)
    return TimeSeriesDataset(X, labels=labels, frequency_note="synthetic class-frequency")


def generate_synthetic(spec):
    """Build the dataset described by ``spec``; equal specs give equal arrays."""
    spec.validate()
    rng = RngStream(spec.seed, f"synthetic/{spec.generator}")
    return {"sinusoid-mix": _sinusoid_mix, "ar-process": _ar_process,
            "class-frequency": _class_frequency}[spec.generator](spec, rng)


__all__ = ["GENERATORS", "SyntheticSpec", "generate_synthetic"]
