"""Deterministic RNG derivation.

All randomness in a run flows from one integer seed through named streams,
so reruns with the same seed are bit-identical regardless of call order.
"""

from __future__ import annotations

import zlib

import numpy as np

# stream ids
INIT = 0
DROPOUT = 1
SHUFFLE = 2
RANDOM_K = 3
SYNTH = 4
SPLIT = 5


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(s) for s in stream])


def stable_id_hash(text: str) -> int:
    """Platform-independent 32-bit hash of a string id."""
    return zlib.crc32(text.encode("utf-8"))
