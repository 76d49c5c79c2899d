"""Deterministic named random streams derived from a single run seed.

Every source of randomness in the pipeline draws from a stream obtained
here, so one --seed pins initialisation, shuffling and noise independently
(consuming noise draws never shifts the shuffle order).
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the given sub-stream, stable across platforms."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
