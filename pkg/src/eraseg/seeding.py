"""Derivation of independent, reproducible random streams.

Every source of randomness in a run is a stream keyed by (seed, purpose,
context...). Streams are independent of call order, so augmenting images
concurrently or reordering stages cannot change what any one stream yields.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*parts: int | str) -> int:
    """Hash a structured key (ints and strings) to a 128-bit seed."""
    joined = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts)
    digest = hashlib.sha256(joined.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream_rng(*parts: int | str) -> np.random.Generator:
    """Deterministic generator for the stream named by ``parts``."""
    return np.random.default_rng(stream_key(*parts))
