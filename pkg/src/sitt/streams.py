"""Splittable, counter-based random streams.

Every random quantity in the package is drawn from a Philox generator
keyed by (master seed, integer path).  Philox is counter-based, so two
streams with different paths are independent no matter how they are
scheduled, and a fixed (seed, path) pair reproduces the same draws on
any platform.  A single Generator must not be shared across threads;
derive one stream per unit of concurrent work instead.
"""

from __future__ import annotations

import numpy as np

__all__ = ["derive", "spawn"]


def derive(master_seed: int, *path: int) -> np.random.Generator:
    """Return an independent generator for (master_seed, *path).

    The same arguments always yield the same stream; distinct paths
    yield statistically independent streams.
    """
    if master_seed < 0 or any(p < 0 for p in path):
        raise ValueError("seed path components must be non-negative integers")
    seq = np.random.SeedSequence((int(master_seed),) + tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split `rng` into `n` independent child streams (deterministic)."""
    return rng.spawn(n)
