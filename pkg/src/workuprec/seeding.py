"""Deterministic named randomness streams.

Every stochastic component in the pipeline draws from a generator derived
from a (root seed, purpose label) pair, so each stage can be re-run in
isolation and still reproduce exactly what the full pipeline did.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(root_seed: int, label: str) -> int:
    """Derive a 64-bit seed for the named sub-stream of ``root_seed``."""
    digest = hashlib.sha256(f"{int(root_seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(root_seed: int, label: str) -> np.random.Generator:
    """A fresh generator for the named sub-stream of ``root_seed``."""
    return np.random.default_rng(stream_seed(root_seed, label))
