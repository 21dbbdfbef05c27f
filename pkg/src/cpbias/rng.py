"""Deterministic random-stream derivation.

Every stochastic routine in this package draws from a substream identified
by an integer seed plus a tuple of tags (strings or integers).  Substreams
are derived with a counter-based generator (Philox) keyed by a splitmix64
hash chain over ``seed xor tag`` values, so results do not depend on call
order or thread schedule.
"""

from __future__ import annotations

import zlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; operates elementwise on uint64."""
    z = (z + _GOLDEN) & _U64
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _U64
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _U64
    return z ^ (z >> np.uint64(31))


def _as_u64(tag: int | str) -> np.uint64:
    if isinstance(tag, str):
        tag = zlib.crc32(tag.encode("utf-8"))
    return np.uint64(int(tag) & 0xFFFFFFFFFFFFFFFF)


def derive_key(seed: int, *tags: int | str) -> int:
    """Collapse (seed, tags...) into a single 64-bit stream key."""
    with np.errstate(over="ignore"):
        h = _splitmix(_as_u64(seed))
        for tag in tags:
            h = _splitmix(h ^ _as_u64(tag))
    return int(h)


def substream(seed: int, *tags: int | str) -> np.random.Generator:
    """Independent generator for (seed, tags), stable across runs and threads."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *tags)))


def hash_uniform(key: int, ids, labels) -> np.ndarray:
    """Uniform(0, 1) variates addressed by (id, label), broadcast over inputs.

    The value at a given (key, id, label) never depends on which other cells
    are requested, so the same randomization can be replayed for calibration
    and for prediction-set construction, and shared across candidate
    transforms.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    labels = np.asarray(labels, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix(np.uint64(key & 0xFFFFFFFFFFFFFFFF))
        h = _splitmix(h ^ _splitmix(ids))
        h = _splitmix(h ^ _splitmix(labels ^ _GOLDEN))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53
