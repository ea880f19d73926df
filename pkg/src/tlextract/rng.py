"""Deterministic random streams: SplitMix64-seeded xoshiro256**.

Every generator in the toolkit draws from a named stream so that identical
(seed, stream key) pairs produce identical output regardless of how many
tensors or traces are generated in between, and so the sequences can be
reproduced outside Python from the published algorithms.

Layout contract (part of the output definition, do not change):

* A stream is a bank of ``LANES`` independent xoshiro256** generators.
* Lane ``i`` is seeded with four consecutive SplitMix64 outputs from the
  chain started at ``mix64(stream_seed, i)``.
* ``raw(n)`` returns outputs in lane-major interleave: element ``t * LANES
  + i`` is step ``t`` of lane ``i``, truncated to ``n``.
* Gaussians come from Box-Muller pairs over consecutive uniforms:
  ``out[2j] = r*cos(theta)``, ``out[2j+1] = r*sin(theta)``.
"""

from __future__ import annotations

import numpy as np

U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF

LANES = 8192

_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MUL1 = 0xBF58476D1CE4E5B9
_SM_MUL2 = 0x94D049BB133111EB


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns (new_state, output)."""
    state = (state + _SM_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _SM_MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM_MUL2) & _MASK64
    return state, z ^ (z >> 31)


def mix64(a: int, b: int) -> int:
    """Combine two 64-bit values into one well-mixed seed."""
    _, out = splitmix64((a ^ ((b * _SM_GAMMA) & _MASK64)) & _MASK64)
    return out


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def stream_seed(master_seed: int, *key_parts: str) -> int:
    """Derive the 64-bit seed of the stream named by ``key_parts``."""
    return mix64(master_seed & _MASK64, fnv1a64("/".join(key_parts).encode("utf-8")))


def _splitmix64_vec(state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    state = (state + U64(_SM_GAMMA)).astype(U64)
    z = state.copy()
    z ^= z >> U64(30)
    z = (z * U64(_SM_MUL1)).astype(U64)
    z ^= z >> U64(27)
    z = (z * U64(_SM_MUL2)).astype(U64)
    return state, z ^ (z >> U64(31))


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << U64(k)) | (x >> U64(64 - k))


class Stream:
    """A bank of xoshiro256** lanes with the fixed interleave layout."""

    def __init__(self, seed: int, lanes: int = LANES):
        self.seed = seed & _MASK64
        self.lanes = lanes
        base = np.arange(lanes, dtype=U64)
        chain = (U64(self.seed) ^ (base * U64(_SM_GAMMA))).astype(U64)
        _, chain = _splitmix64_vec(chain)  # chain[i] == mix64(seed, i)
        state = np.empty((4, lanes), dtype=U64)
        for w in range(4):
            chain, out = _splitmix64_vec(chain)
            state[w] = out
        self._s = state

    def _next_block(self) -> np.ndarray:
        s = self._s
        result = (_rotl((s[1] * U64(5)).astype(U64), 7) * U64(9)).astype(U64)
        t = (s[1] << U64(17)).astype(U64)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` uint64 outputs in the lane-major interleave."""
        blocks = -(-n // self.lanes)
        out = np.empty((blocks, self.lanes), dtype=U64)
        for b in range(blocks):
            out[b] = self._next_block()
        return out.reshape(-1)[:n]

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in (0, 1], using the top 53 bits of each output."""
        bits = self.raw(n) >> U64(11)
        return (bits.astype(np.float64) + 1.0) * (2.0 ** -53)

    def gaussian(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller over consecutive uniforms."""
        pairs = -(-n // 2)
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = (2.0 * np.pi) * u[1::2]
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via random-key argsort."""
        keys = self.raw(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in permutation order."""
        if k > n:
            raise ValueError("cannot draw more distinct indices than exist")
        return self.permutation(n)[:k]


def stream(master_seed: int, *key_parts: str, lanes: int = LANES) -> Stream:
    """Open the named deterministic stream."""
    return Stream(stream_seed(master_seed, *key_parts), lanes=lanes)
