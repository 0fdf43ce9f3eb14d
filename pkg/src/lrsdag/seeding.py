"""Deterministic RNG derivation from a master seed and string tags."""

import zlib

import numpy as np


def derive_seed_sequence(seed, *tags):
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.SeedSequence(entropy)


def derive_int(seed, *tags):
    """A stable 32-bit sub-seed for APIs that take a plain integer."""
    return int(derive_seed_sequence(seed, *tags).generate_state(1)[0])


def derive_rng(seed, *tags):
    """A generator that depends only on (seed, tags), stable across runs."""
    return np.random.default_rng(derive_seed_sequence(seed, *tags))
