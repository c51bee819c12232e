"""Named random streams derived from a single root seed.

Every consumer asks for a stream by label, e.g. ``stream(seed, "sde", image_id, member)``,
so subsystems draw independent, order-free randomness.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update((int(root) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def stream(root: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))
