"""Keyed random streams.

Every consumer of randomness asks for a generator by key, e.g.
``keyed_rng("corrupt", base_seed, "jitter", 3, sample_id)``. The key is
hashed into a 128-bit seed so that distinct keys give independent streams
and the same key always reproduces the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def key_seed(*key: object) -> int:
    """Stable 64-bit integer derived from an arbitrary key tuple."""
    text = "\x1f".join(f"{type(k).__name__}:{k}" for k in key)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def keyed_rng(*key: object) -> np.random.Generator:
    text = "\x1f".join(f"{type(k).__name__}:{k}" for k in key)
    digest = hashlib.blake2b(text.encode(), digest_size=16).digest()
    words = np.frombuffer(digest, dtype="<u4").tolist()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
