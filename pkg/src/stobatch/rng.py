"""Purpose-tagged random streams.

Every consumer of randomness (noise draws, initialization, batch shuffling,
attack restarts, trainer sampling) gets its own Philox stream keyed by a
hash of ``(seed, tag, *indices)``, so streams never overlap and a run is
reproducible from one top-level seed.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed, *tags):
    """Hash a seed and any number of tags (str or int) into a 64-bit sub-seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed) & _MASK64 if isinstance(seed, (int, np.integer)) else seed).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed, *tags):
    """Return a counter-based generator for the stream named by ``tags``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *tags)))
