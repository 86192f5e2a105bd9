"""Deterministic seeding helpers.

All stochastic operations in the toolkit are driven by 64-bit seeds.  Child
seeds are derived by hashing a master seed together with string tokens, so
regenerating an artifact is stable under reordering of the work (each item's
seed depends only on its own identity, never on its position in a batch).

Random streams use numpy's Philox counter-based generator: the value at
stream position i is a pure function of (seed, i), which makes parallel
generation order-independent.
"""

import hashlib

import numpy as np

__all__ = ["derive_seed", "generator", "bernoulli"]

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, *tokens) -> int:
    """Derive a child 64-bit seed from a master seed and string tokens."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed) & _MASK64).encode())
    for tok in tokens:
        h.update(b"\x00")
        h.update(str(tok).encode())
    return int.from_bytes(h.digest(), "little")


def generator(seed: int, *tokens) -> np.random.Generator:
    """Counter-based generator keyed by (seed, tokens)."""
    key = derive_seed(seed, *tokens) if tokens else int(seed) & _MASK64
    return np.random.Generator(np.random.Philox(key=key))


def bernoulli(p: float, seed: int, index: int) -> bool:
    """Indexed Bernoulli draw: depends only on (seed, index), not call order."""
    g = generator(seed, "bernoulli", index)
    return bool(g.random() < p)
