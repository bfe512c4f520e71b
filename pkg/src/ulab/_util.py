"""Shared helpers: content hashing, seed derivation, worker count."""

from __future__ import annotations

import os
import struct

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def mix_seed(*parts: int | str) -> int:
    """Derive a new 63-bit seed from a base seed and a sequence of tags.

    Deterministic across processes; used to give every stage of a run its
    own independent RNG stream.
    """
    buf = bytearray()
    for p in parts:
        if isinstance(p, str):
            enc = p.encode("utf-8")
            buf += struct.pack("<cI", b"s", len(enc)) + enc
        else:
            buf += struct.pack("<cQ", b"i", int(p) & _MASK64)
    return fnv1a64(bytes(buf)) >> 1


def thread_count() -> int:
    """Worker cap for parallel sections, from ULAB_THREADS (default 1)."""
    raw = os.environ.get("ULAB_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
