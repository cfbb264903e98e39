"""Labeled sub-seeds: one root seed fans out into independent streams, so
turning one component on or off never shifts another component's draws."""
import hashlib

import numpy as np
import torch


def sub_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(root)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_rng(root: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(sub_seed(root, label)))


def torch_generator(root: int, label: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(sub_seed(root, label))
    return gen
