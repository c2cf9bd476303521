"""Deterministic RNG derivation.

Every stochastic draw in the toolkit flows through a generator derived from
(seed, role, *keys) so that independent concerns (batch order, masking, Gumbel
noise, distractor sampling) consume independent streams and any step can be
replayed without serializing RNG state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *keys: object) -> int:
    """Hash a base seed and a role/key path into a 63-bit child seed."""
    text = ":".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(seed: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
