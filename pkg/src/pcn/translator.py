"""Cross-phase translation: generators, patch discriminators, GAN losses.

The generated-vs-real distance is the least-squares GAN form, which is
stable at the tiny batch sizes used here. Both losses operate on the
normalized [-1, 1] intensity scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .core import Phase, Volume
from .errors import PhaseMismatchError, ShapeMismatchError
from .networks import (
    PatchDiscriminator,
    TranslationNet,
    init_params,
    load_param_vector,
    param_count,
    param_vector,
    unit_to_hu,
)
from .rng import torch_rng
from .segmenter import volume_to_tensor


@dataclass(frozen=True)
class GenArch:
    num_res_blocks: int = 3
    base_width: int = 8
    in_channels: int = 1

    def to_dict(self) -> dict:
        return {"num_res_blocks": self.num_res_blocks, "base_width": self.base_width,
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "GenArch":
        return cls(**d)


@dataclass(frozen=True)
class DiscArch:
    base_width: int = 16
    in_channels: int = 1

    def to_dict(self) -> dict:
        return {"base_width": self.base_width, "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscArch":
        return cls(**d)


class Generator:
    """A translation network with a fixed (source -> target) direction."""

    def __init__(self, arch: GenArch, direction: tuple[Phase, Phase], net: TranslationNet,
                 dtype: torch.dtype = torch.float32):
        if direction[0] is direction[1]:
            raise ValueError("generator direction must cross phases")
        self.arch = arch
        self.direction = direction
        self.net = net.to(dtype)
        self.dtype = dtype

    @property
    def source(self) -> Phase:
        return self.direction[0]

    @property
    def target(self) -> Phase:
        return self.direction[1]

    @property
    def param_count(self) -> int:
        return param_count(self.net)

    def params(self) -> torch.Tensor:
        return param_vector(self.net)

    def set_params(self, vec) -> None:
        load_param_vector(self.net, vec)

    def fake(self, x: torch.Tensor) -> torch.Tensor:
        """Translate a normalized (B,1,H,W) batch; output stays in [-1,1]."""
        return self.net(x)


class Discriminator:
    """A patch discriminator judging realness grids for one phase."""

    def __init__(self, arch: DiscArch, phase: Phase, net: PatchDiscriminator,
                 dtype: torch.dtype = torch.float32):
        self.arch = arch
        self.phase = phase
        self.net = net.to(dtype)
        self.dtype = dtype

    @property
    def param_count(self) -> int:
        return param_count(self.net)

    def params(self) -> torch.Tensor:
        return param_vector(self.net)

    def set_params(self, vec) -> None:
        load_param_vector(self.net, vec)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def gen_init(arch: GenArch, direction: tuple[Phase, Phase], seed: int,
             dtype: torch.dtype = torch.float32) -> Generator:
    net = TranslationNet(arch.num_res_blocks, arch.base_width, arch.in_channels)
    init_params(net, torch_rng(seed, "gen-init", direction[0].value, direction[1].value),
                style="gan")
    return Generator(arch=arch, direction=direction, net=net, dtype=dtype)


def disc_init(arch: DiscArch, phase: Phase, seed: int,
              dtype: torch.dtype = torch.float32) -> Discriminator:
    net = PatchDiscriminator(arch.base_width, arch.in_channels)
    init_params(net, torch_rng(seed, "disc-init", phase.value), style="gan")
    return Discriminator(arch=arch, phase=phase, net=net, dtype=dtype)


def translate(g: Generator, x: Volume) -> Volume:
    """Translate one volume to the generator's target phase."""
    if x.phase is not g.source:
        raise PhaseMismatchError(
            f"generator maps {g.source.value}->{g.target.value} but got a "
            f"{x.phase.value} volume"
        )
    with torch.no_grad():
        out = g.fake(volume_to_tensor(x, g.dtype))
    hu = unit_to_hu(out)[0, 0].numpy().astype(np.float32)
    return Volume(data=hu, phase=g.target, case_id=x.case_id, spacing=x.spacing)


def adversarial_distance(d_model: Discriminator, fake: torch.Tensor,
                         real_batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN terms for one direction.

    gen_term  = mean (D(fake) - 1)^2          (drives the generator)
    disc_term = mean (D(real) - 1)^2 + mean D(fake)^2   (drives D; the fake
    is detached so the discriminator objective never reaches the generator)
    """
    if real_batch.numel() == 0 or real_batch.shape[0] == 0:
        raise ValueError("real batch is empty")
    if fake.shape[-2:] != real_batch.shape[-2:]:
        raise ShapeMismatchError(
            f"fake {tuple(fake.shape)} and real {tuple(real_batch.shape)} grids differ"
        )
    fake_scores = d_model.scores(fake)
    gen_term = (fake_scores - 1.0).pow(2).mean()
    disc_term = (d_model.scores(real_batch) - 1.0).pow(2).mean() \
        + d_model.scores(fake.detach()).pow(2).mean()
    return gen_term, disc_term


def cycle_loss(g_ab: Generator, g_ba: Generator, x: Union[Volume, torch.Tensor]) -> torch.Tensor:
    """Mean L1 between x and g_ba(g_ab(x)), on the normalized scale."""
    if g_ab.target is not g_ba.source or g_ab.source is not g_ba.target:
        raise PhaseMismatchError(
            f"generators do not compose: {g_ab.source.value}->{g_ab.target.value} "
            f"then {g_ba.source.value}->{g_ba.target.value}"
        )
    if isinstance(x, Volume):
        if x.phase is not g_ab.source:
            raise PhaseMismatchError(
                f"cycle starts at {g_ab.source.value} but got {x.phase.value}"
            )
        x = volume_to_tensor(x, g_ab.dtype)
    return (g_ba.fake(g_ab.fake(x)) - x).abs().mean()
