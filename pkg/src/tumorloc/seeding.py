"""Derived seeds for independent, reproducible random streams."""

import numpy as np


def derive_seed(*keys: int) -> int:
    """Mix non-negative integer keys into one 64-bit seed."""
    if any(int(k) < 0 for k in keys):
        raise ValueError("seed keys must be non-negative")
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)
    return int(state[0])
