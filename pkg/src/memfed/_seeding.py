"""Deterministic RNG streams keyed by (seed, tag, ...) tuples."""
from __future__ import annotations

import hashlib

import numpy as np


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*keys) -> np.random.Generator:
    """Independent generator for the stream named by ``keys``.

    Identical keys always yield identical streams; any differing key yields
    a statistically independent one.
    """
    return np.random.default_rng(np.random.SeedSequence([_key_int(k) for k in keys]))


def derive_seed(*keys) -> int:
    return int(rng_for(*keys).integers(0, 2**63 - 1))
