"""Deterministic named seed derivation.

Every random draw in the pipeline flows from one master seed through a
named derivation: ``derive_seed(master, "train", "vqvae", step)``. There
is no hidden global state; the same (master, names) pair always yields
the same stream, on any platform, which is what makes corpus generation,
training, and scoring reproducible and safely parallelizable.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(master_seed: int, *parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF]
                                  + [_encode(p) for p in parts])


def derive_seed(master_seed: int, *parts) -> int:
    """64-bit seed deterministically derived from the master seed and names."""
    state = seed_sequence(master_seed, *parts).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def numpy_rng(master_seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master_seed, *parts))


def torch_generator(master_seed: int, *parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master_seed, *parts))
    return gen
