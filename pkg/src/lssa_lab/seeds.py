"""Named seed derivation: root -> "attack" -> pipeline -> pair_id -> stage."""

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *path) -> int:
    key = "/".join([str(int(root))] + [str(p) for p in path])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little") & (2**63 - 1)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
