"""Deterministic random streams keyed by (global seed, frame key, stage tag).

A stream's key is a 128-bit BLAKE2b digest of the triple; the digest keys a
Philox counter-based generator, so a stream never depends on global state,
call order elsewhere, process, or thread count.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def stream_key(global_seed: int, frame_key: str, stage_tag: str) -> np.ndarray:
    h = hashlib.blake2b(digest_size=16, person=b"robustfusion")
    h.update(struct.pack("<Q", int(global_seed) & 0xFFFF_FFFF_FFFF_FFFF))
    for part in (frame_key, stage_tag):
        raw = part.encode("utf-8")
        h.update(struct.pack("<I", len(raw)))
        h.update(raw)
    return np.frombuffer(h.digest(), dtype="<u8").astype(np.uint64)


class SampleRng:
    """A keyed stream; wraps :class:`numpy.random.Generator` over Philox."""

    def __init__(self, global_seed: int, frame_key: str, stage_tag: str):
        self.global_seed = int(global_seed)
        self.frame_key = frame_key
        self.stage_tag = stage_tag
        self.key = stream_key(global_seed, frame_key, stage_tag)
        self.generator = np.random.Generator(np.random.Philox(key=self.key))

    def random(self, n: int | None = None):
        return self.generator.random(n)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self) -> str:
        return f"SampleRng(seed={self.global_seed}, frame={self.frame_key!r}, stage={self.stage_tag!r})"


def generator(global_seed: int, frame_key: str, stage_tag: str) -> np.random.Generator:
    return SampleRng(global_seed, frame_key, stage_tag).generator
