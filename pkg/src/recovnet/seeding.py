"""Deterministic derivation of independent random streams."""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def rng_from(*parts: int) -> np.random.Generator:
    """Derive a Generator from a tuple of integer keys.

    The same key tuple always yields the same stream. Work that is keyed
    per item, e.g. ``rng_from(seed, record_index, variant)``, therefore
    produces identical results whether items are processed serially, in a
    different order, or in parallel.
    """
    entropy = [int(p) & _MASK64 for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(*parts: int) -> int:
    """Collapse a key tuple into a single integer seed."""
    return int(rng_from(*parts).integers(0, 2**63))
