"""Named random sub-streams derived from one 64-bit run seed.

Each component asks for its own generator by name plus integer indices
(cohort, chain, trial...), so results do not depend on the order or the
thread in which components run.
"""

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=4).digest(), "big")


def derive_rng(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for stream `name` at `indices` under `seed`."""
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(stream_key(name), *(int(i) for i in indices))
    )
    return np.random.default_rng(sequence)
