"""Deterministic random-stream derivation.

Every stochastic component draws from a named substream derived from one
root seed, so a full experiment is reproducible from a single integer.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(root_seed: int, name: str, index: int = 0) -> int:
    """Derive a 64-bit child seed from (root seed, stream name, counter)."""
    payload = f"{root_seed}:{name}:{index}".encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for the named substream; same arguments, same stream."""
    return np.random.default_rng(substream_seed(root_seed, name, index))
