"""Deterministic seeded randomness.

Two generators are used, both reproducible across platforms:

* splitmix64 for model weights: the state advances by a fixed odd gamma
  and each output is a bijective mix of the state, so a whole stream can
  be produced vectorized from its seed.
* numpy's PCG64 for sampling noise (standard normals).

Per-stage seeds are derived from a master seed by hashing the stage
label, so adding a stage never perturbs the streams of earlier stages.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4B7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def derive_seed(master_seed: int, label: str) -> int:
    """Hash-split a master seed into an independent 64-bit stage seed."""
    digest = hashlib.sha256(f"{master_seed & _U64_MASK}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """First `count` outputs of splitmix64 initialized with `seed`."""
    base = np.uint64(seed & _U64_MASK)
    steps = (np.arange(1, count + 1, dtype=np.uint64)) * _GAMMA
    return _mix(base + steps)


def uniform_matrix(seed: int, shape: tuple[int, ...], low: float, high: float) -> np.ndarray:
    """Uniform [low, high) matrix drawn from the splitmix64 stream."""
    n = int(np.prod(shape)) if shape else 1
    u = splitmix64_stream(seed, n).astype(np.float64) / 2.0**64
    return (low + (high - low) * u).reshape(shape)


def xavier_matrix(seed: int, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    """Seeded uniform [-a, a] weights with a = sqrt(6 / (fan_in + fan_out))."""
    a = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return uniform_matrix(seed, shape, -a, a)


def normal_matrix(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """Seeded standard-normal matrix (PCG64 stream)."""
    return np.random.default_rng(seed & _U64_MASK).standard_normal(shape)
