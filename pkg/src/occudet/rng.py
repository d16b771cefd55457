"""Deterministic, splittable random streams.

Built on numpy's Philox-4x64 counter-based generator, keyed by
(root_seed, stream_id).  Streams derived from the same root are independent
and do not care about the order in which other streams were used, so every
module can pull its own stream without coordinating with the rest of the
pipeline.  The same (root_seed, stream_id, call sequence) reproduces the
same bits on every platform numpy supports.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_MIX = 0x9E3779B97F4A7C15  # golden-ratio odd multiplier for stream derivation

# Well-known stream ids used by the pipeline.  Plain data, listed here so a
# config + seed fully determines every random draw in a run.
STREAM_SCENE = 1
STREAM_PARAMS = 2
STREAM_AUG = 3
STREAM_EVAL = 4
STREAM_GRADCHECK = 5


@dataclass(frozen=True)
class Rng:
    """Handle to one deterministic stream; derive children with ``stream()``."""

    root_seed: int
    stream_id: int = 0

    def stream(self, child_id: int) -> "Rng":
        """Derive an independent child stream. Order-insensitive."""
        mixed = (self.stream_id * _MIX + child_id + 1) & _MASK64
        return Rng(self.root_seed & _MASK64, mixed)

    def generator(self) -> np.random.Generator:
        """Fresh generator at counter zero for this (root_seed, stream_id)."""
        key = np.array([self.root_seed & _MASK64, self.stream_id & _MASK64],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))
