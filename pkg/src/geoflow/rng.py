"""Seeded random-number streams.

One run seed fans out into labeled substreams so that adding a stochastic
consumer never perturbs the draws of existing ones, and identical
(seed, label) pairs give bitwise-identical streams on a platform.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream"]


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the (seed, label) substream, stable across processes."""
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, tag)))
