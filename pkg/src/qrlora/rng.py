"""Deterministic derivation of named random streams from a single 64-bit seed.

Every random draw in the package flows through `stream(seed, *tags)`; the
tags name the purpose (e.g. ``"kaiming", layer_idx``) so that adding a new
consumer never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *tags: str | int) -> np.random.Generator:
    """PCG64 generator keyed by (seed, tags); stable across runs and platforms."""
    h = hashlib.sha256()
    for tag in tags:
        h.update(str(tag).encode())
        h.update(b"\x00")
    words = np.frombuffer(h.digest()[:16], dtype=np.uint32)
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(w) for w in words)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(seed: int, *tags: str | int) -> int:
    """A derived 63-bit integer seed, for APIs that take a plain seed."""
    return int(stream(seed, *tags).integers(0, 2**63))
