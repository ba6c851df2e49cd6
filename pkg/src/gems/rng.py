"""Named, counter-based random streams.

Every random draw in the package comes from ``stream(seed, tag, *keys)``.
Streams are Philox generators keyed by the global seed, a stable hash of the
purpose tag and any integer keys (step index, individual index, ...), so two
draws with different tags or keys never share state.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & _MASK64, _tag_word(tag)]
    entropy.extend(int(k) & _MASK64 for k in keys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, tag: str, *keys: int) -> int:
    """A 64-bit child seed, used where a plan records its own seed."""
    return int(stream(seed, tag, *keys).integers(0, 2**63 - 1, dtype=np.int64))


def round_half_up(x: float) -> int:
    # tolerance absorbs binary representation error (0.35 * 100 = 35.00000000000001)
    return int(np.floor(x + 0.5 + 1e-9))
