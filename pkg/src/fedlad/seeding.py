"""Deterministic seed derivation shared by every randomized component."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from an ordered tuple of ints/strings."""
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash64(global_seed: int, client_id: int) -> int:
    return derive_seed(int(global_seed), "client", int(client_id))


def round_rng(seed: int, round_index: int) -> np.random.Generator:
    """Generator for per-round randomness, keyed on (seed, round)."""
    return np.random.default_rng([int(seed), int(round_index)])
