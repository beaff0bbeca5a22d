"""Named deterministic RNG streams.

Every stochastic consumer (split shuffling, augmentation, point tie-breaks,
teacher noise, weight init) derives its own generator from the experiment
seed plus a tuple of tags. Adding or removing one consumer never shifts the
draws of another, which is what makes paired runs and mid-training resume
reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _entropy(tag: object) -> int:
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, *tags: object) -> np.random.Generator:
    """Independent generator for the consumer identified by ``tags``."""
    seq = np.random.SeedSequence([seed & _MASK64] + [_entropy(t) for t in tags])
    return np.random.default_rng(seq)


def seed_for(seed: int, *tags: object) -> int:
    """Collapse (seed, tags) into a single non-negative 63-bit integer.

    Used where an API wants a plain int seed (e.g. ``torch.manual_seed``).
    """
    seq = np.random.SeedSequence([seed & _MASK64] + [_entropy(t) for t in tags])
    return int(seq.generate_state(1, np.uint64)[0] >> 1)
