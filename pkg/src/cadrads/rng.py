"""Named random sub-streams derived from a single seed."""

import zlib

import numpy as np
import torch


def _entropy(seed, names):
    return [int(seed)] + [zlib.crc32(str(n).encode()) for n in names]


def substream(seed, *names) -> np.random.Generator:
    """A numpy generator keyed by ``seed`` and a path of stream names."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, names)))


def torch_generator(seed, *names) -> torch.Generator:
    state = np.random.SeedSequence(_entropy(seed, names)).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator()
    g.manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)
    return g
