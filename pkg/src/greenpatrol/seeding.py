"""Deterministic RNG streams derived from a single master seed.

Every stochastic component draws from its own named stream so that modules
can be run and tested in isolation while still reproducing exactly what a
full experiment run would do. The split is a stable hash, not process- or
platform-dependent: ``derive_seed(master, label)`` is the first 8 bytes of
``sha256(f"{master}:{label}")``, so the same (master seed, label) pair maps
to the same stream everywhere.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, label: str) -> int:
    """Map a master seed and a stream label to a 63-bit child seed."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream(master_seed: int, label: str) -> np.random.Generator:
    """Return the named RNG stream for this master seed."""
    return np.random.default_rng(derive_seed(master_seed, label))
