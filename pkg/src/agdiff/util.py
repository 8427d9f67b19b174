"""Shared seeding helpers: stable per-item RNG streams."""

from __future__ import annotations

import numpy as np


def rng_from(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator for (seed, *keys); independent across keys.

    Per-item streams derived this way stay identical whether items run
    serially or in parallel.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
