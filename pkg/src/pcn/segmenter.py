"""Per-phase segmentation model: encoder-decoder plus its training loss.

The training loss is the mean L1 distance between the predicted
probability map and the one-hot encoded labels, averaged over every cell
and class. A soft-Dice loss is available as a config option.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .core import LabelMask, Phase, Volume
from .errors import ShapeMismatchError
from .networks import (
    SegNet,
    hu_to_unit,
    init_params,
    load_param_vector,
    param_count,
    param_vector,
)
from .rng import torch_rng


@dataclass(frozen=True)
class SegArch:
    depth: int = 3
    base_width: int = 16
    num_classes: int = 4
    in_channels: int = 1

    def to_dict(self) -> dict:
        return {"depth": self.depth, "base_width": self.base_width,
                "num_classes": self.num_classes, "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "SegArch":
        return cls(**d)


@dataclass(frozen=True)
class ProbMap:
    """H x W x C map of per-cell class probabilities (rows sum to 1)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatchError(f"ProbMap must be HxWxC, got shape {data.shape}")
        sums = data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6) or data.min() < -1e-9 or data.max() > 1 + 1e-9:
            raise ValueError("probabilities must be in [0,1] and sum to 1 per cell")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def num_classes(self) -> int:
        return self.data.shape[-1]

    def argmax_mask(self, phase: Optional[Phase] = None) -> LabelMask:
        """Decode to a hard mask; ties go to the lowest class index."""
        return LabelMask(data=np.argmax(self.data, axis=-1).astype(np.uint8),
                         num_classes=self.num_classes, phase=phase)


class SegModel:
    """A segmentation network tagged with the phase it was trained for."""

    def __init__(self, arch: SegArch, phase: Optional[Phase], net: SegNet,
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

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        """Forward a normalized (B,1,H,W) batch to (B,C,H,W) probabilities."""
        if x.dim() != 4 or x.shape[1] != self.arch.in_channels:
            raise ShapeMismatchError(
                f"expected (B,{self.arch.in_channels},H,W) input, got {tuple(x.shape)}"
            )
        return self.net(x)


def seg_init(arch: SegArch, seed: int, dtype: torch.dtype = torch.float32,
             phase: Optional[Phase] = None, grid_size: Optional[int] = None) -> SegModel:
    """Build and deterministically initialize a segmentation model."""
    if grid_size is not None:
        f = 2 ** arch.depth
        if grid_size % f or grid_size // f < 2:
            raise ValueError(
                f"depth {arch.depth} is too deep for a {grid_size}x{grid_size} grid"
            )
    net = SegNet(arch.depth, arch.base_width, arch.num_classes, arch.in_channels)
    init_params(net, torch_rng(seed, "seg-init"))
    return SegModel(arch=arch, phase=phase, net=net, dtype=dtype)


def volume_to_tensor(v: Union[Volume, np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    """HU grid -> normalized (1,1,H,W) tensor on the fixed [-1,1] scale."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    t = torch.from_numpy(np.ascontiguousarray(data)).to(dtype)
    return hu_to_unit(t).unsqueeze(0).unsqueeze(0)


def mask_to_tensor(m: Union[LabelMask, np.ndarray]) -> torch.Tensor:
    data = m.data if isinstance(m, LabelMask) else np.asarray(m)
    return torch.from_numpy(np.ascontiguousarray(data)).long().unsqueeze(0)


def one_hot(y: torch.Tensor, num_classes: int, dtype: torch.dtype) -> torch.Tensor:
    """(B,H,W) int labels -> (B,C,H,W) one-hot floats."""
    return torch.nn.functional.one_hot(y, num_classes).permute(0, 3, 1, 2).to(dtype)


def seg_forward(model: SegModel, x: Union[Volume, np.ndarray]) -> ProbMap:
    """Segment one volume, returning a probability map."""
    with torch.no_grad():
        probs = model.probs(volume_to_tensor(x, model.dtype))
    return ProbMap(data=probs[0].permute(1, 2, 0).numpy())


def seg_loss(model: SegModel, x, y, kind: str = "l1") -> torch.Tensor:
    """Differentiable segmentation loss of one batch (or one Volume/mask).

    x: Volume or normalized (B,1,H,W) tensor. y: LabelMask or (B,H,W)
    int tensor. Returns a scalar tensor; zero iff the probabilities
    exactly one-hot match the labels (for the default L1 form).
    """
    if isinstance(x, (Volume, np.ndarray)):
        x = volume_to_tensor(x, model.dtype)
    if isinstance(y, (LabelMask, np.ndarray)):
        y = mask_to_tensor(y)
    if x.shape[-2:] != y.shape[-2:] or x.shape[0] != y.shape[0]:
        raise ShapeMismatchError(
            f"image batch {tuple(x.shape)} does not align with labels {tuple(y.shape)}"
        )
    probs = model.probs(x)
    return probs_loss(probs, y, model.arch.num_classes, kind)


def probs_loss(probs: torch.Tensor, y: torch.Tensor, num_classes: int,
               kind: str = "l1") -> torch.Tensor:
    """Loss between a (B,C,H,W) probability batch and (B,H,W) labels."""
    target = one_hot(y, num_classes, probs.dtype)
    if kind == "l1":
        return (probs - target).abs().mean()
    if kind == "softdice":
        dims = (0, 2, 3)
        inter = (probs * target).sum(dims)
        denom = probs.sum(dims) + target.sum(dims)
        dice = (2 * inter + 1e-7) / (denom + 1e-7)
        return 1.0 - dice.mean()
    raise ValueError(f"unknown loss kind '{kind}', expected 'l1' or 'softdice'")
