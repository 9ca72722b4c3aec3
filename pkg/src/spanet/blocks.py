"""Structuring blocks: multi-scale conv block, multi-scale dense unit,
and the down/up transitioning blocks used to assemble the networks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor


def receptive_field(kernel: int, dilation: int) -> int:
    """Effective receptive field of a single dilated convolution.

    A k-tap kernel with dilation d spans k + (k-1)(d-1) input pixels.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    return kernel + (kernel - 1) * (dilation - 1)


def _check_branch_vectors(kernels, dilations) -> None:
    if len(kernels) != 4 or len(dilations) != 4:
        raise ValueError(
            f"expected 4 parallel branches, got {len(kernels)} kernels / "
            f"{len(dilations)} dilations"
        )
    for k in kernels:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel sizes must be odd and positive, got {k}")
    for d in dilations:
        if d < 1:
            raise ValueError(f"dilation rates must be >= 1, got {d}")


@dataclass(frozen=True)
class MSBConfig:
    """Multi-scale block hyperparameters: branch width and the per-branch
    kernel/dilation vectors."""

    channels: int
    kernels: tuple[int, int, int, int]
    dilations: tuple[int, int, int, int]

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        _check_branch_vectors(self.kernels, self.dilations)

    def receptive_fields(self) -> tuple[int, ...]:
        return tuple(receptive_field(k, d) for k, d in zip(self.kernels, self.dilations))


@dataclass(frozen=True)
class MSDUConfig:
    """Dense unit hyperparameters: growth rate, branch kernel/dilation
    vectors, and number of block+concat repetitions."""

    growth_rate: int
    kernels: tuple[int, int, int, int]
    dilations: tuple[int, int, int, int]
    repetitions: int

    def __post_init__(self):
        if self.growth_rate < 1:
            raise ValueError(f"growth_rate must be >= 1, got {self.growth_rate}")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        _check_branch_vectors(self.kernels, self.dilations)


@dataclass(frozen=True)
class TransitionConfig:
    """Channel reduction rate for the transitioning blocks."""

    reduce_rate: float

    def __post_init__(self):
        if not 0.0 < self.reduce_rate < 1.0:
            raise ValueError(
                f"reduce_rate must lie in (0, 1), got {self.reduce_rate}"
            )


class ConvBNReLU(nn.Module):
    """Convolution followed by batch normalization and ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation=1):
        super().__init__()
        padding = dilation * (kernel_size - 1) // 2
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel_size,
            padding=padding, dilation=dilation,
        )
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.relu(self.bn(self.conv(x)))


def _check_input(x: Tensor) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected NCHW input, got shape {tuple(x.shape)}")
    if x.shape[1] == 0:
        raise ValueError("input has zero channels")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ValueError(f"input has zero spatial extent: {tuple(x.shape)}")


class MultiScaleBlock(nn.Module):
    """Four parallel dilated conv branches between 1x1 entry and 3x3 exit
    terminals; all branches preserve the spatial shape.

    ``out_channels`` defaults to the branch width; inside a dense unit it
    is set to the growth rate so each block emits exactly that many maps.
    """

    def __init__(self, in_channels: int, cfg: MSBConfig, out_channels: int | None = None):
        super().__init__()
        if in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {in_channels}")
        self.cfg = cfg
        self.out_channels = out_channels if out_channels is not None else cfg.channels
        f = cfg.channels
        self.entry = ConvBNReLU(in_channels, f, 1)
        self.branches = nn.ModuleList(
            ConvBNReLU(f, f, k, dilation=d)
            for k, d in zip(cfg.kernels, cfg.dilations)
        )
        self.exit = ConvBNReLU(4 * f, self.out_channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x)
        h = self.entry(x)
        h = torch.cat([branch(h) for branch in self.branches], dim=1)
        return self.exit(h)


class MultiScaleDenseUnit(nn.Module):
    """Repeated multi-scale blocks with dense concatenation.

    Each repetition appends ``growth_rate`` new channels onto the running
    stack, so the first ``in_channels`` output channels are the input
    carried through unchanged.
    """

    def __init__(self, in_channels: int, cfg: MSDUConfig):
        super().__init__()
        if in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {in_channels}")
        self.cfg = cfg
        msb_cfg = MSBConfig(cfg.growth_rate, cfg.kernels, cfg.dilations)
        self.blocks = nn.ModuleList(
            MultiScaleBlock(in_channels + j * cfg.growth_rate, msb_cfg,
                            out_channels=cfg.growth_rate)
            for j in range(cfg.repetitions)
        )
        self.out_channels = in_channels + cfg.repetitions * cfg.growth_rate

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x)
        for block in self.blocks:
            x = torch.cat([x, block(x)], dim=1)
        return x


class DownTransition(nn.Module):
    """1x1 conv block reducing channels by the reduce rate, then 2x2
    average pooling with stride 2 (ceil mode, so odd extents round up)."""

    def __init__(self, in_channels: int, cfg: TransitionConfig):
        super().__init__()
        out_channels = math.floor(cfg.reduce_rate * in_channels)
        if out_channels < 1:
            raise ValueError(
                f"reduce_rate {cfg.reduce_rate} on {in_channels} channels "
                "leaves no output channels"
            )
        self.reduce = ConvBNReLU(in_channels, out_channels, 1)
        self.pool = nn.AvgPool2d(2, stride=2, ceil_mode=True)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x)
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ValueError(f"input too small to pool: {tuple(x.shape)}")
        return self.pool(self.reduce(x))


class UpTransition(nn.Module):
    """2x2 stride-2 transposed convolution reducing channels by the reduce
    rate, followed by batch normalization and ReLU; doubles each spatial
    dimension exactly."""

    def __init__(self, in_channels: int, cfg: TransitionConfig):
        super().__init__()
        out_channels = math.floor(cfg.reduce_rate * in_channels)
        if out_channels < 1:
            raise ValueError(
                f"reduce_rate {cfg.reduce_rate} on {in_channels} channels "
                "leaves no output channels"
            )
        self.conv = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x)
        return self.relu(self.bn(self.conv(x)))


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal init for conv kernels, zeros for biases,
    ones/zeros for normalization scale/shift."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
