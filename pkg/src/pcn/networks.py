"""Network building blocks shared by the segmentation and translation models.

Images enter every network on a fixed affine scale: HU in [-125, 275] maps
to [-1, 1] via (hu - 75) / 200. Generators emit tanh outputs on the same
scale, so denormalized intensities always stay inside the HU window. The
mapping is part of the checkpoint contract and must not change.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .core import HU_MAX, HU_MIN

HU_CENTER = (HU_MAX + HU_MIN) / 2.0  # 75
HU_HALFSPAN = (HU_MAX - HU_MIN) / 2.0  # 200


def hu_to_unit(x: torch.Tensor) -> torch.Tensor:
    return (x - HU_CENTER) / HU_HALFSPAN


def unit_to_hu(x: torch.Tensor) -> torch.Tensor:
    return x * HU_HALFSPAN + HU_CENTER


def init_params(module: nn.Module, gen: torch.Generator, style: str = "he") -> None:
    """Deterministically initialize all parameters from one generator.

    style="he": fan-in scaled normals, for the segmenters. style="gan":
    N(0, 0.02) normals, the usual choice for adversarial pairs; with the
    generator's residual output path this starts translation at the
    identity map. Iteration follows definition order, so the same seed
    always produces bit-identical parameters.
    """
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.dim() >= 2:
                if style == "gan":
                    std = 0.02
                else:
                    std = math.sqrt(2.0 / p[0].numel())
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
            elif "weight" in name:
                p.fill_(1.0)
            else:
                p.zero_()


def conv_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True))


class SegNet(nn.Module):
    """Encoder-decoder with skip connections and per-cell softmax output.

    depth is the number of 2x downsamplings; spatial dims must be divisible
    by 2**depth. Output has num_classes channels of probabilities.
    """

    def __init__(self, depth: int, base_width: int, num_classes: int, in_channels: int = 1):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if base_width < 4:
            raise ValueError("base_width must be >= 4")
        self.depth = depth
        widths = [base_width * (2 ** i) for i in range(depth)]
        self.encoders = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.encoders.append(conv_relu(prev, w))
            prev = w
        self.bottleneck = conv_relu(prev, prev)
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            out_w = max(w // 2, base_width)
            self.decoders.append(conv_relu(prev + w, out_w))
            prev = out_w
        self.head = nn.Conv2d(prev, num_classes, 1)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        f = 2 ** self.depth
        if h % f or w % f or h // f < 2 or w // f < 2:
            raise ValueError(
                f"input {h}x{w} incompatible with depth {self.depth}: "
                f"dims must be multiples of {f} and at least {2 * f}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(torch.cat([skip, self.up(x)], dim=1))
        return torch.softmax(self.head(x), dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.c1 = nn.Conv2d(width, width, 3, padding=1)
        self.c2 = nn.Conv2d(width, width, 3, padding=1)
        self.n1 = nn.InstanceNorm2d(width)
        self.n2 = nn.InstanceNorm2d(width)

    def forward(self, x):
        h = torch.relu(self.n1(self.c1(x)))
        return x + self.n2(self.c2(h))


class TranslationNet(nn.Module):
    """2-downsample / N-residual / 2-upsample image-to-image generator.

    The network predicts a residual on its input and the sum is clamped
    to [-1, 1], so generated intensities stay inside the HU window after
    denormalization. With small-weight init the map starts near the
    identity, which keeps cycle reconstruction trivial from step one and
    lets training focus on per-structure intensity shifts.
    """

    def __init__(self, num_res_blocks: int, base_width: int, in_channels: int = 1):
        super().__init__()
        w = base_width
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w, 7, padding=3, padding_mode="reflect"),
            nn.ReLU(inplace=True),
        )
        self.down = nn.Sequential(
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * w) for _ in range(num_res_blocks)])
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1), nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(w, in_channels, 7, padding=3, padding_mode="reflect")

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input {h}x{w} must be divisible by 4")
        delta = self.out(self.up(self.blocks(self.down(self.stem(x)))))
        return (x + delta).clamp(-1.0, 1.0)


class PatchDiscriminator(nn.Module):
    """Three strided conv layers plus a score head; receptive field 34."""

    def __init__(self, base_width: int = 16, in_channels: int = 1):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=1, padding=1), nn.InstanceNorm2d(4 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)

    def patch_output_size(self, h: int, w: int) -> tuple[int, int]:
        with torch.no_grad():
            out = self.forward(torch.zeros(1, 1, h, w))
        return out.shape[-2], out.shape[-1]


def param_vector(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def load_param_vector(module: nn.Module, vec) -> None:
    vec = torch.as_tensor(vec)
    offset = 0
    for p in module.parameters():
        n = p.numel()
        with torch.no_grad():
            p.copy_(vec[offset:offset + n].reshape(p.shape).to(p.dtype))
        offset += n
    if offset != vec.numel():
        raise ValueError(f"parameter vector has {vec.numel()} entries, model needs {offset}")


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
