"""Deterministic child random streams.

Every stochastic stage asks for a generator keyed by ``(stage, country, ...)``
so results do not depend on the order in which countries are processed.
"""

import hashlib

import numpy as np


def _key_words(keys):
    words = []
    for key in keys:
        digest = hashlib.sha256(str(key).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def child_rng(seed, *keys):
    """Return a ``numpy.random.Generator`` for ``seed`` and a tuple of keys."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=_key_words(keys))
    return np.random.default_rng(ss)


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
