"""The full five-network model bundle trained by the two-stage schedule."""

from __future__ import annotations

from typing import Optional

import torch

from .core import Phase
from .rng import derive_seed
from .segmenter import SegArch, SegModel, seg_init
from .translator import (
    DiscArch,
    Discriminator,
    GenArch,
    Generator,
    disc_init,
    gen_init,
)

STAGE_INIT = "init"
STAGE_SEPARATE = "separate"
STAGE_JOINT = "joint"


class ModelBundle:
    """Both segmenters, both generators, both discriminators.

    Tracks the global step counters that index the batch-sampling streams,
    so a stage can resume exactly where the previous one stopped. Optimizer
    state lives here too, which keeps momentum continuous across stages.
    """

    def __init__(self, f_a: SegModel, f_v: SegModel, g_av: Generator, g_va: Generator,
                 d_a: Discriminator, d_v: Discriminator, seed: int = 0):
        self.f_a = f_a
        self.f_v = f_v
        self.g_av = g_av
        self.g_va = g_va
        self.d_a = d_a
        self.d_v = d_v
        self.seed = seed
        self.stage = STAGE_INIT
        self.seg_steps = 0
        self.gan_steps = 0
        self.optimizers: dict[str, torch.optim.Optimizer] = {}

    def seg_model(self, phase: Phase) -> SegModel:
        return self.f_a if phase is Phase.ARTERIAL else self.f_v

    def generator_from(self, phase: Phase) -> Generator:
        """The generator that consumes this phase's images."""
        return self.g_av if phase is Phase.ARTERIAL else self.g_va

    def discriminator(self, phase: Phase) -> Discriminator:
        return self.d_a if phase is Phase.ARTERIAL else self.d_v

    def named_models(self) -> dict:
        return {"f_a": self.f_a, "f_v": self.f_v, "g_av": self.g_av, "g_va": self.g_va,
                "d_a": self.d_a, "d_v": self.d_v}

    @property
    def num_classes(self) -> int:
        return self.f_a.arch.num_classes


def bundle_init(seed: int, num_classes: int = 4,
                seg_arch: Optional[SegArch] = None,
                gen_arch: Optional[GenArch] = None,
                disc_arch: Optional[DiscArch] = None,
                dtype: torch.dtype = torch.float32) -> ModelBundle:
    """Deterministically initialize a full bundle from one seed."""
    seg_arch = seg_arch or SegArch(num_classes=num_classes)
    if seg_arch.num_classes != num_classes:
        seg_arch = SegArch(depth=seg_arch.depth, base_width=seg_arch.base_width,
                           num_classes=num_classes, in_channels=seg_arch.in_channels)
    gen_arch = gen_arch or GenArch()
    disc_arch = disc_arch or DiscArch()
    a, v = Phase.ARTERIAL, Phase.VENOUS
    return ModelBundle(
        f_a=seg_init(seg_arch, derive_seed(seed, "f", a.value), dtype=dtype, phase=a),
        f_v=seg_init(seg_arch, derive_seed(seed, "f", v.value), dtype=dtype, phase=v),
        g_av=gen_init(gen_arch, (a, v), derive_seed(seed, "g", "av"), dtype=dtype),
        g_va=gen_init(gen_arch, (v, a), derive_seed(seed, "g", "va"), dtype=dtype),
        d_a=disc_init(disc_arch, a, derive_seed(seed, "d", a.value), dtype=dtype),
        d_v=disc_init(disc_arch, v, derive_seed(seed, "d", v.value), dtype=dtype),
        seed=seed,
    )
