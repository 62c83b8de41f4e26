"""Small shared helpers: seed derivation and float formatting."""

import hashlib

import numpy as np
import torch


def derive_seed(root_seed: int, *tags) -> int:
    """Stable 63-bit sub-seed from a root seed and a tuple of purpose tags.

    Every RNG stream in the package is keyed this way, so frame- or
    sample-parallel execution reproduces sequential runs bit for bit.
    """
    key = repr((int(root_seed),) + tags).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def np_rng(root_seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *tags))


def torch_gen(root_seed: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root_seed, *tags))
    return gen


def fmt_float(x: float) -> str:
    """Decimal with 17 significant digits; round-trips any binary64 exactly."""
    return format(float(x), ".17g")
