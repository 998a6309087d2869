"""Deterministic seed derivation: every random stream descends from one
master seed via child = master XOR sha256(name)[:4]."""

import hashlib


def stable_hash32(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


def derive_seed(master: int, name: str) -> int:
    return (int(master) ^ stable_hash32(name)) & 0x7FFFFFFF
