"""Named deterministic RNG streams derived from one master seed.

Every source of randomness in a run pulls from its own named child stream,
so adding or removing a consumer (e.g. extra diagnostics) never perturbs
the draws seen by anyone else.
"""

from __future__ import annotations

import hashlib

import numpy as np

RngSeed = int


def child_seed(master: RngSeed, *path: object) -> int:
    """Hash (master, *path) into a 64-bit child seed.

    Path elements may be ints or strings; they are encoded unambiguously
    (type tag + value) so ("a", 1) and ("a1",) cannot collide.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(b"seed:" + str(int(master)).encode())
    for part in path:
        if isinstance(part, (int, np.integer)):
            h.update(b"/i" + str(int(part)).encode())
        else:
            h.update(b"/s" + str(part).encode())
    return int.from_bytes(h.digest(), "little")


def stream(master: RngSeed, *path: object) -> np.random.Generator:
    """A fresh generator for the child stream named by ``path``."""
    return np.random.default_rng(child_seed(master, *path))
