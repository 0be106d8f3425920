"""Deterministic random streams with named child derivation.

Every stochastic component draws from an `Rng` handle. A handle is defined by a
root seed plus a path of string tags, so re-running with the same seed replays
the exact stream regardless of how sibling components interleave their draws.
"""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["Rng"]


def _tag_word(tag: str) -> int:
    # stable across processes (no hash()); crc32 keeps tags inside one uint32 word
    return zlib.crc32(tag.encode("utf-8"))


class Rng:
    """PCG64 generator keyed by (seed, tag path), split into named children."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, tag: str) -> "Rng":
        """Derive an independent stream for `tag`; same tag, same stream."""
        if not tag:
            raise ValueError("child tag must be a non-empty string")
        return Rng(self.seed, self._path + (_tag_word(tag),))

    # -- delegation to the underlying numpy Generator --------------------

    def integers(self, low, high=None, size=None, dtype=np.int64):
        return self.generator.integers(low, high=high, size=size, dtype=dtype)

    def random(self, size=None):
        return self.generator.random(size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc=loc, scale=scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low=low, high=high, size=size)

    def permutation(self, x):
        return self.generator.permutation(x)

    def shuffle(self, x) -> None:
        self.generator.shuffle(x)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def dirichlet(self, alpha, size=None):
        return self.generator.dirichlet(alpha, size=size)

    # -- checkpoint support ----------------------------------------------

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "path": list(self._path),
            "bit_generator": self.generator.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"
