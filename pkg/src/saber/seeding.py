"""Deterministic seed fan-out.

One top-level seed is hashed together with stage/item labels so every
stage (and every per-query sampler) gets an independent, reproducible
stream. The derivation is sha256 over 'seed:label[:label...]' truncated
to 63 bits.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *labels: str) -> int:
    key = ":".join([str(seed), *labels]).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big") >> 1
