"""Seed derivation: one root seed split into independent streams by label."""

from __future__ import annotations

import hashlib

import numpy as np


def _word(label) -> int:
    if isinstance(label, (int, np.integer)) and label >= 0:
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit seed for ``(root, *labels)``; labels may be str or int."""
    ss = np.random.SeedSequence([_word(root)] + [_word(x) for x in labels])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def generator(root: int, *labels) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(root, *labels)``."""
    ss = np.random.SeedSequence([_word(root)] + [_word(x) for x in labels])
    return np.random.Generator(np.random.Philox(ss))
