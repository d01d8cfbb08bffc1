"""Seeded, splittable random streams.

Every stochastic function in the package takes an explicit
``numpy.random.Generator``; nothing touches global state.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int | None = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams; advances nothing in the parent's draws."""
    return rng.spawn(n)
