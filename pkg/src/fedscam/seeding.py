"""Labelled seed derivation.

Every random stream in a run is derived from the master seed and a tuple of
labels, e.g. ``derive_seed(master, "batches", round, epoch)``. The labels are
joined, hashed with SHA-256 and the first 8 bytes become the child seed, so
streams are independent of call order and of each other.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    text = "|".join([str(int(master))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))
