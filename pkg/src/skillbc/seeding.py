"""Deterministic derivation of named rng streams from one master seed.

Every component pulls randomness from its own named stream, so adding a new
consumer (extra logging, a new sampler) never shifts the draws seen by the
others. Stream keys are hashed with blake2, not Python's salted hash().
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(name) -> int:
    digest = hashlib.blake2b(str(name).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master_seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed),
                                  spawn_key=tuple(_key(n) for n in names))


def stream(master_seed: int, *names) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *names)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *names)))
