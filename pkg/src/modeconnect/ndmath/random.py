"""Seeded random streams.

All randomness goes through ``numpy.random.Generator`` on the PCG64 bit
generator, whose output for a given seed is fixed across platforms.
"""

from __future__ import annotations

import numpy as np

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(seed))


def spawn(rng: Rng, count: int) -> list[Rng]:
    """Independent child streams, e.g. one per parallel run."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(count)]


def sample_gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    z = rng.standard_normal((rows, cols))
    return mean + std * z
