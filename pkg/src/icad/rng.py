"""Deterministic derivation of independent random streams.

Every stochastic component in this package draws from a generator derived
from a root seed plus a label path (episode index, tree index, dataset name,
...).  Streams are independent of execution order and thread scheduling, so
runs with identical configs reproduce bit-identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _entropy(part: int | str) -> int:
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if value < 0:
            raise ValueError(f"seed parts must be non-negative, got {value}")
        return value
    raise TypeError(f"seed part must be int or str, got {type(part).__name__}")


def derive_rng(*parts: int | str) -> np.random.Generator:
    """Return a generator keyed by the given label path.

    The same parts always produce the same stream; any change to any part
    produces a statistically independent one.
    """
    if not parts:
        raise ValueError("derive_rng needs at least one seed part")
    return np.random.default_rng(np.random.SeedSequence([_entropy(p) for p in parts]))
