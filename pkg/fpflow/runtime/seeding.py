from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_words(parts: tuple[Key, ...]) -> tuple[int, ...]:
    words = []
    for part in parts:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            words.append(int(part))
    return tuple(words)


def substream(seed: int, *names: Key) -> np.random.Generator:
    """Counter-based generator for a named substream, e.g. substream(0, "sampling", 2, 17)."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=_key_words(names))
    return np.random.Generator(np.random.Philox(sequence))
