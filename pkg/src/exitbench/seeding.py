"""Deterministic seed derivation.

Every random stream in the pipeline derives from one root seed through a
named path ("train/shuffle/epoch3", "corrupt/gaussian/2/sample17"), so
runs reproduce exactly and streams never collide by accident. Hashing is
sha256 of the decimal root and path parts; Python's hash() is salted per
process and never used.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, *path) -> int:
    """64-bit seed for the stream named by `path` under `root_seed`."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode("ascii"))
    for part in path:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(root_seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *path))
