"""Deterministic seed derivation and generator construction.

Every random draw in the package flows through a named stream derived from
a base seed, so that reruns with the same seed are bit-identical and
independent subsystems (anatomy sampling, batch selection, weight init)
never share state. Streams are stateless: a (seed, tag, index) triple
always yields the same generator, which makes training stages resumable
without carrying RNG objects around.
"""

from __future__ import annotations

import os
import zlib

import numpy as np
import torch

_U32 = 2**32


def derive_seed(base_seed: int, *tags) -> int:
    """Map (base_seed, tags...) to a stable 32-bit seed.

    String tags are hashed with crc32 (stable across processes and
    platforms, unlike built-in hash()).
    """
    words = [int(base_seed) % _U32]
    for tag in tags:
        if isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        else:
            words.append(int(tag) % _U32)
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1)[0])


def np_rng(base_seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, *tags))


def torch_rng(base_seed: int, *tags) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base_seed, *tags))
    return g


def deterministic_mode_requested() -> bool:
    """True when PCN_DETERMINISTIC=1 forces deterministic runs globally."""
    return os.environ.get("PCN_DETERMINISTIC", "") == "1"


def enter_deterministic_mode() -> None:
    """Pin torch to a fixed single-thread schedule.

    CPU kernels are already bitwise reproducible for a fixed thread count;
    pinning to one thread removes the dependence on the host's core count
    so checkpoints match across machines too.
    """
    torch.set_num_threads(1)
