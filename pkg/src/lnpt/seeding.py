"""Labeled RNG stream derivation.

Each concern (init, batch order, Hutchinson probes, random pruning,
score-batch sampling) gets its own stream derived from the master seed
by hashing the label, so toggling one feature never perturbs another's
draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{label}:{master}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))
