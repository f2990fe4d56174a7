"""Stable seed derivation.

Python's ``hash`` is salted per process, so sub-seeds are derived from a
BLAKE2b digest of the parts instead.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Map an arbitrary tuple of ints/strings to a 63-bit seed, stably across runs."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
