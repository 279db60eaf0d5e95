"""Deterministic hashing helpers.

Every seeded decision in the package (patient splits, shuffle permutations,
hashed embeddings) flows through these functions so results are bit-stable
across runs, platforms, and Python versions.  Python's builtin ``hash`` is
salted per process and must never be used for anything persisted.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray | int) -> np.ndarray:
    """SplitMix64 finalizer over uint64 values (vectorized, wraps silently)."""
    z = np.asarray(x, dtype=np.uint64) + _GAMMA
    z = (z ^ (z >> _U64(30))) * _M1
    z = (z ^ (z >> _U64(27))) * _M2
    return z ^ (z >> _U64(31))


def hash_to_unit(h: np.ndarray) -> np.ndarray:
    """Map uint64 hashes to floats in [0, 1) using the top 53 bits."""
    return (np.asarray(h, dtype=np.uint64) >> _U64(11)).astype(np.float64) * 2.0**-53


def stable_hash64(*parts: object, seed: int = 0) -> int:
    """64-bit keyed digest of a tuple of strings/ints/bytes.

    Parts are length-prefixed before hashing so ("ab", "c") and ("a", "bc")
    cannot collide.
    """
    h = hashlib.blake2b(digest_size=8, key=int(seed).to_bytes(8, "little", signed=True))
    for part in parts:
        if isinstance(part, bytes):
            data = part
        elif isinstance(part, str):
            data = part.encode("utf-8")
        elif isinstance(part, (int, np.integer)):
            data = int(part).to_bytes(16, "little", signed=True)
        else:
            raise TypeError(f"unhashable part type: {type(part)!r}")
        h.update(len(data).to_bytes(4, "little"))
        h.update(data)
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts: object, seed: int = 0) -> np.random.Generator:
    """Generator whose stream is a pure function of (seed, parts)."""
    return np.random.default_rng(stable_hash64(*parts, seed=seed))


def canonical_json(obj: object) -> str:
    """Stable JSON encoding used for fingerprints and byte-identical files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
