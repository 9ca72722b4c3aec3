"""Encoder-decoder network assembly: a stem conv, per-level dense units
separated by down/up transitions, skip connections, and re-injection of
the (area-downscaled) network input after every transition so positional
channels stay visible at every depth."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .blocks import (
    ConvBNReLU,
    DownTransition,
    MSDUConfig,
    MultiScaleDenseUnit,
    TransitionConfig,
    UpTransition,
    _check_input,
    init_weights,
)

# Per-level branch kernel/dilation ladder, shallowest to deepest. The first
# row gives branch receptive fields [3, 9, 25, 49], the last [3, 5, 9, 13];
# the middle rows interpolate between them.
LEVEL_KERNELS = ((3, 3, 5, 7), (3, 3, 5, 5), (3, 3, 3, 5), (3, 5, 3, 3))
LEVEL_DILATIONS = ((1, 4, 6, 8), (1, 2, 4, 6), (1, 2, 4, 4), (1, 1, 4, 6))

DEFAULT_LEVELS = 4
DEFAULT_STEM_CHANNELS = 32
DEFAULT_GROWTH_RATE = 68
DEFAULT_REDUCE_RATE = 0.5
DEFAULT_REPETITIONS = 4


def default_ladder(levels: int) -> tuple[tuple[tuple[int, ...], ...], tuple[tuple[int, ...], ...]]:
    """Kernel/dilation rows for all 2*levels-1 dense units (encoder levels,
    bottleneck, then the decoder mirroring the encoder)."""
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    rows = [round(i * (len(LEVEL_KERNELS) - 1) / (levels - 1)) for i in range(levels)]
    enc_k = [LEVEL_KERNELS[r] for r in rows]
    enc_d = [LEVEL_DILATIONS[r] for r in rows]
    kernels = enc_k + enc_k[:-1][::-1]
    dilations = enc_d + enc_d[:-1][::-1]
    return tuple(kernels), tuple(dilations)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters. ``kernels``/``dilations``/``repetitions``
    hold one entry per dense unit in encoder-bottleneck-decoder order
    (2*levels - 1 entries); growth rate is shared across all units."""

    in_channels: int
    out_channels: int
    head: str = "single"
    levels: int = DEFAULT_LEVELS
    stem_channels: int = DEFAULT_STEM_CHANNELS
    growth_rate: int = DEFAULT_GROWTH_RATE
    reduce_rate: float = DEFAULT_REDUCE_RATE
    repetitions: tuple[int, ...] = field(default=None)  # type: ignore[assignment]
    kernels: tuple[tuple[int, ...], ...] = field(default=None)  # type: ignore[assignment]
    dilations: tuple[tuple[int, ...], ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.head not in ("single", "dual"):
            raise ValueError(f"head must be 'single' or 'dual', got {self.head!r}")
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in_channels and out_channels must be positive")
        if self.stem_channels < 1 or self.growth_rate < 1:
            raise ValueError("stem_channels and growth_rate must be positive")
        if not 0.0 < self.reduce_rate < 1.0:
            raise ValueError(f"reduce_rate must lie in (0, 1), got {self.reduce_rate}")
        n_units = 2 * self.levels - 1
        if self.repetitions is None:
            object.__setattr__(self, "repetitions", (DEFAULT_REPETITIONS,) * n_units)
        else:
            object.__setattr__(self, "repetitions", tuple(int(b) for b in self.repetitions))
        if self.kernels is None or self.dilations is None:
            if not (self.kernels is None and self.dilations is None):
                raise ValueError("kernels and dilations must be given together")
            k, d = default_ladder(self.levels)
            object.__setattr__(self, "kernels", k)
            object.__setattr__(self, "dilations", d)
        else:
            object.__setattr__(self, "kernels", tuple(tuple(int(v) for v in row) for row in self.kernels))
            object.__setattr__(self, "dilations", tuple(tuple(int(v) for v in row) for row in self.dilations))
        for name in ("repetitions", "kernels", "dilations"):
            if len(getattr(self, name)) != n_units:
                raise ValueError(
                    f"{name} must have {n_units} entries for levels={self.levels}, "
                    f"got {len(getattr(self, name))}"
                )
        # triggers the shared branch-vector validation
        for i in range(n_units):
            self.unit_config(i)

    def unit_config(self, index: int) -> MSDUConfig:
        return MSDUConfig(
            growth_rate=self.growth_rate,
            kernels=self.kernels[index],
            dilations=self.dilations[index],
            repetitions=self.repetitions[index],
        )

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "head": self.head,
            "levels": self.levels,
            "stem_channels": self.stem_channels,
            "growth_rate": self.growth_rate,
            "reduce_rate": self.reduce_rate,
            "repetitions": list(self.repetitions),
            "kernels": [list(row) for row in self.kernels],
            "dilations": [list(row) for row in self.dilations],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(**data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


class SpaNet(nn.Module):
    """The spatially aware encoder-decoder.

    Encoder: stem conv, then per level a dense unit followed by a down
    transition and concatenation of the input downscaled to the new
    resolution. Decoder: per level an up transition, concatenation of the
    matching encoder skip and the input at that resolution, then a dense
    unit. Heads are 1x1 convs squashed with a sigmoid so every output
    lies in [0, 1].
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.levels - 1
        tcfg = TransitionConfig(cfg.reduce_rate)
        self.stem = ConvBNReLU(cfg.in_channels, cfg.stem_channels, 3)

        enc_units, downs = [], []
        ch = cfg.stem_channels
        skip_channels = []
        for i in range(n):
            unit = MultiScaleDenseUnit(ch, cfg.unit_config(i))
            enc_units.append(unit)
            skip_channels.append(unit.out_channels)
            down = DownTransition(unit.out_channels, tcfg)
            downs.append(down)
            ch = down.out_channels + cfg.in_channels
        self.encoder = nn.ModuleList(enc_units)
        self.downs = nn.ModuleList(downs)

        self.bottleneck = MultiScaleDenseUnit(ch, cfg.unit_config(n))
        ch = self.bottleneck.out_channels

        dec_units, ups = [], []
        for i in reversed(range(n)):
            up = UpTransition(ch, tcfg)
            ups.append(up)
            ch = up.out_channels + skip_channels[i] + cfg.in_channels
            unit = MultiScaleDenseUnit(ch, cfg.unit_config(2 * cfg.levels - 2 - i))
            dec_units.append(unit)
            ch = unit.out_channels
        self.ups = nn.ModuleList(ups)
        self.decoder = nn.ModuleList(dec_units)

        if cfg.head == "single":
            self.head = nn.Conv2d(ch, cfg.out_channels, 1)
        else:
            self.head_seg = nn.Conv2d(ch, 1, 1)
            self.head_det = nn.Conv2d(ch, 1, 1)
        init_weights(self)

    def _scaled_inputs(self, x: Tensor) -> list[Tensor]:
        scaled = [x]
        for _ in range(self.cfg.levels - 1):
            scaled.append(F.avg_pool2d(scaled[-1], 2))
        return scaled

    def forward(self, x: Tensor):
        _check_input(x)
        div = 2 ** (self.cfg.levels - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {div}"
            )
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        scaled = self._scaled_inputs(x)
        skips = []
        h = self.stem(x)
        for i, (unit, down) in enumerate(zip(self.encoder, self.downs)):
            h = unit(h)
            skips.append(h)
            h = torch.cat([down(h), scaled[i + 1]], dim=1)
        h = self.bottleneck(h)
        n = self.cfg.levels - 1
        for j, (up, unit) in enumerate(zip(self.ups, self.decoder)):
            i = n - 1 - j
            h = up(h)
            h = torch.cat([h, skips[i], scaled[i]], dim=1)
            h = unit(h)
        if self.cfg.head == "single":
            return torch.sigmoid(self.head(h))
        return torch.sigmoid(self.head_seg(h)), torch.sigmoid(self.head_det(h))


def build_spanet(cfg: NetworkConfig) -> SpaNet:
    """Single-head network mapping in_channels to out_channels maps in [0, 1]."""
    if cfg.head != "single":
        raise ValueError("build_spanet requires a single-head config")
    return SpaNet(cfg)


def build_dual_head(cfg: NetworkConfig) -> SpaNet:
    """Shared trunk with independent segmentation and detection heads."""
    if cfg.head != "dual":
        raise ValueError("build_dual_head requires a dual-head config")
    if cfg.in_channels != 3:
        raise ValueError(f"dual-head network takes RGB input, got in_channels={cfg.in_channels}")
    return SpaNet(cfg)


def count_parameters(model: nn.Module) -> int:
    """Total trainable scalar parameters."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
