"""Deterministic seed derivation for every stochastic stage.

A single user-facing seed fans out to independent streams by mixing in a
hash of the stage name (and optional integer indices such as trial or
sample ordinals). The derivation is platform-independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_entropy(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(base: int | None, *tags) -> np.random.SeedSequence:
    entropy = [] if base is None else [int(base)]
    entropy.extend(_tag_entropy(t) for t in tags)
    return np.random.SeedSequence(entropy)


def derived_rng(base: int | None, *tags) -> np.random.Generator:
    """Generator for stage ``tags`` under master seed ``base``."""
    return np.random.default_rng(seed_sequence(base, *tags))
