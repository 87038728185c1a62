"""Seeded, splittable random streams.

Every stochastic routine in this package takes an explicit
``numpy.random.Generator``.  Replicated experiments derive one stream per
replicate from ``(seed, experiment-id, replicate-index)`` so that results do
not depend on scheduling or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "substream"]


def _as_words(part) -> list[int]:
    if isinstance(part, (int, np.integer)):
        return [int(part) & 0xFFFFFFFF, (int(part) >> 32) & 0xFFFFFFFF]
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    raise TypeError(f"stream path components must be int or str, got {type(part)!r}")


def stream(seed: int, *path) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and an arbitrary int/str path.

    Identical ``(seed, path)`` pairs always yield identical generators;
    distinct paths yield statistically independent ones.
    """
    entropy: list[int] = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in path:
        entropy.extend(_as_words(part))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def substream(rng: np.random.Generator) -> np.random.Generator:
    """Spawn an independent child generator (used to give a Poisson process
    its own dedicated stream without disturbing the caller's)."""
    return rng.spawn(1)[0]
