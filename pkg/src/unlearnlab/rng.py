"""Named, splittable random streams.

Every consumer of randomness (forget split, shuffling, augmentation, random
labels, initialisation) draws from its own substream keyed by the master seed
and a role label, so changing one stage never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def _key_words(part) -> list[int]:
    if isinstance(part, (int, np.integer)):
        v = int(part)
        if v < 0:
            raise ValueError(f"stream keys must be non-negative, got {v}")
        return [v & 0xFFFFFFFF, v >> 32] if v >> 32 else [v]
    if isinstance(part, float):
        return _label_words(repr(part))
    return _label_words(str(part))


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    words: list[int] = []
    for k in keys:
        words.extend(_key_words(k))
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(words))


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; equal inputs give equal streams."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys) -> int:
    """A 64-bit seed for a child stage, e.g. the retrain model's initialisation."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])
