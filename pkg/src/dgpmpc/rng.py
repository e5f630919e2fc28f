"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by a
tuple ``(seed, *keys)``.  Keys name *what* the randomness is for (a purpose
label plus integer coordinates such as episode, step or particle), so a draw
never depends on how many draws happened before it or on which worker made it.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean stream keys are ambiguous")
    key = int(key)
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return key


def stream(seed: int, *keys: Key) -> np.random.Generator:
    """Return an independent generator for the coordinate ``(seed, *keys)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


class StreamKey:
    """A seed plus a key prefix; ``child`` extends the prefix."""

    __slots__ = ("seed", "keys")

    def __init__(self, seed: int, *keys: Key):
        self.seed = int(seed)
        self.keys = tuple(keys)

    def child(self, *keys: Key) -> "StreamKey":
        return StreamKey(self.seed, *self.keys, *keys)

    def generator(self, *keys: Key) -> np.random.Generator:
        return stream(self.seed, *self.keys, *keys)

    def __repr__(self) -> str:
        return f"StreamKey({self.seed}, {', '.join(map(repr, self.keys))})"


def as_generator(rng: Union[np.random.Generator, StreamKey, int, None]) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, StreamKey):
        return rng.generator()
    if rng is None:
        raise ValueError("an explicit random stream is required")
    return stream(int(rng))
