"""Stable sub-seed derivation so every random stream traces back to one master seed."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str, index: int = 0) -> int:
    """Hash (seed, purpose, index) into a 63-bit seed, stable across processes and platforms."""
    digest = hashlib.blake2b(f"{int(seed)}|{purpose}|{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def rng_for(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose, index))
