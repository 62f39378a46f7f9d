"""Deterministic random streams built on the counter-based Philox generator.

Every stochastic component draws from a named substream so that the same
top-level seed always reproduces the same run, and no two components ever
consume from the same stream. Stream keys are derived by hashing
(seed, name path), which makes them stable across platforms and numpy
versions that ship Philox.
"""

from __future__ import annotations

import hashlib

import numpy as np

_DOMAIN = b"sketchdiff.rng.v1"
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _derive_key(seed: int, names: tuple[str, ...]) -> np.ndarray:
    h = hashlib.sha256(_DOMAIN)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for name in names:
        h.update(b"/")
        h.update(str(name).encode("utf-8"))
    digest = h.digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


class Rng:
    """Root of a deterministic stream tree.

    `stream(*names)` returns a fresh `numpy.random.Generator` whose draws
    depend only on (seed, names). Calling it twice with the same names gives
    two generators positioned at the start of the identical stream; callers
    that need to continue a stream must hold on to the generator.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def stream(self, *names: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=_derive_key(self.seed, names)))

    def child(self, *names: str) -> "Rng":
        """A new Rng rooted at a derived seed; streams never overlap the parent's."""
        key = _derive_key(self.seed, names + ("child",))
        return Rng(int(key[0]))

    def draw_seed(self, *names: str) -> int:
        """A reproducible 63-bit seed, e.g. for echoing back to API clients."""
        return int(_derive_key(self.seed, names + ("seed",))[0] >> 1)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed})"
