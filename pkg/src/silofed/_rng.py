"""Keyed random streams.

Every stochastic step in the simulator draws from a generator keyed by
(seed, labels...) so results do not depend on execution order or thread
scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(label: object) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def keyed_rng(seed: int, *labels: object) -> np.random.Generator:
    """Return a generator for the substream ``(seed, *labels)``."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_key(lab) for lab in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))
