"""Deterministic seed derivation.

A single master seed fans out to per-module streams through a hash of
(master, label), so adding a new consumer never shifts the seeds of
existing ones.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np
import torch

_MAX_TORCH_SEED = (1 << 63) - 1


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit sub-seed for the given label."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & _MAX_TORCH_SEED


def torch_rng(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & _MAX_TORCH_SEED)
    return gen


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


@contextmanager
def fork_seed(seed: int | None):
    """Seed torch's global RNG inside the block; no-op when seed is None."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & _MAX_TORCH_SEED)
        yield
