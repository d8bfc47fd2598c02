"""Named random streams derived from one user seed.

``stream(seed, "phantom")`` and ``stream(seed, "reverse")`` are independent
and stable across runs and platforms, so subcommands compose without sharing
generator state.
"""

import zlib

import numpy as np


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def child_seed(seed: int, name: str) -> int:
    """A plain integer seed for APIs that take ints."""
    return int(stream_seed(seed, name).generate_state(1, dtype=np.uint32)[0])
