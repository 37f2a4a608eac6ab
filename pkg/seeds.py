#!/usr/bin/env python3
"""Named RNG streams fanned out from one config seed.

Every consumer asks for a stream by name, e.g. ``rng(seed, "synth", "N0007")``,
so adding a consumer never shifts the draws of another.
"""
import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    """64-bit seed from a root seed and a path of names."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode("utf-8"))
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def philox(seed: int, *names) -> np.random.Generator:
    """Counter-based stream; used for dropout masks (one per layer per step)."""
    key = derive_seed(seed, *names)
    return np.random.Generator(np.random.Philox(key=key))
