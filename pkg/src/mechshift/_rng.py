"""Seed derivation so every task gets a stream keyed only on (seed, labels)."""

from __future__ import annotations

import hashlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.blake2b(str(label).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Independent generator for the stream named by ``labels`` under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(lb) for lb in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *labels) -> int:
    return int(derive_rng(seed, *labels).integers(0, 2**63 - 1))


def open_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    k = rng.integers(0, 2**53, size=size, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) / 2.0**53
