"""Seed derivation helpers.

Every random decision in the package flows through a generator built from an
explicit integer seed path, so any run can be reproduced from its recorded
seeds alone.
"""

from __future__ import annotations

import numpy as np


def derive_seed(*parts: int) -> int:
    """Mix a path of non-negative integers into a single 64-bit seed."""
    if not parts:
        raise ValueError("at least one seed component required")
    for p in parts:
        if p < 0:
            raise ValueError(f"seed components must be non-negative, got {p}")
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def derive_rng(*parts: int) -> np.random.Generator:
    """Generator seeded from a path of integers (see derive_seed)."""
    return np.random.default_rng(derive_seed(*parts))
