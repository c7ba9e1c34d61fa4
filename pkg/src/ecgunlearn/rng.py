"""Seeded random streams.

All randomness comes from numpy's PCG64 (PCG XSL RR 128/64) bit generator.
Per-stage seeds are derived from one master seed:

    h    = FNV-1a-64(stage name as UTF-8)
    seed = splitmix64(master XOR h)

so any implementation can reproduce the seed of a named stage.
"""
import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def derive_seed(master: int, stage: str) -> int:
    return splitmix64((int(master) & _MASK) ^ fnv1a64(stage.encode("utf-8")))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK))
