"""FNV-1a hashing used for cache checksums and parameter fingerprints."""

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a over a byte string; pass ``h`` to chain chunks."""
    prime = FNV_PRIME
    mask = _MASK
    for b in data:
        h = ((h ^ b) * prime) & mask
    return h


def params_hash(params) -> int:
    """Fingerprint of an ordered parameter list (shapes and exact f64 bytes)."""
    h = FNV_OFFSET
    for p in params:
        a = np.ascontiguousarray(p.value, dtype="<f8")
        h = fnv1a64(np.array(a.shape, dtype="<i8").tobytes(), h)
        h = fnv1a64(a.tobytes(), h)
    return h
