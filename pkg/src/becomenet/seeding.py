"""Labeled random streams derived from one run seed.

Each consumer asks for its own stream by name, so adding a new consumer
never shifts the numbers another one sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_seed(seed: int, label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for the stream ``label`` under ``seed``."""
    return np.random.default_rng(stream_seed(seed, label))
