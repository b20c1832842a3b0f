"""Splittable counter-based random streams.

Every random draw in the project goes through a Philox generator keyed by a
SeedSequence, so a stream can be split per layer, per trial or per sample
without the children depending on evaluation order.
"""

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    """Philox generator for the integer key path ``key`` (e.g. (seed, trial))."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def spawn(seed: int, n: int) -> list[np.random.Generator]:
    """n independent child streams of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """n directions uniform on the unit sphere in R^dim."""
    v = rng.standard_normal((n, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return v / norms
