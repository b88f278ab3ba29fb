"""Stacked fully-convolutional hourglass generator and patch discriminator.

Shapes follow the torch convention ``(B, C, H, W)``.  Convolutions whose
output only ever reaches a batch-norm layer carry no bias (it would be
cancelled by the normalization and receive a zero gradient).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
from torch import nn

DOWNSAMPLE_MODES = ("strided_conv", "max_pool")

# strided / transposed convolutions use kernel 4, stride 2, padding 1:
# exact halving and doubling of even extents
SAMPLE_KERNEL = 4
SAMPLE_PADDING = 1


class ConfigError(ValueError):
    pass


@dataclass
class HourglassConfig:
    depth: int = 5
    feat_channels: int = 128
    in_channels: int = 128

    def validate(self):
        if self.depth < 1:
            raise ConfigError("hourglass depth must be >= 1")
        if self.feat_channels < 2 or self.feat_channels % 2:
            raise ConfigError("feat_channels must be an even number >= 2")


@dataclass
class GeneratorConfig:
    n_stacks: int = 3
    resolution: int = 128
    image_channels: int = 3
    pose_channels: int = 16
    hourglass: HourglassConfig = field(default_factory=HourglassConfig)
    downsample_mode: str = "strided_conv"

    def __post_init__(self):
        if isinstance(self.hourglass, dict):
            self.hourglass = HourglassConfig(**self.hourglass)

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.pose_channels

    def validate(self):
        self.hourglass.validate()
        if self.n_stacks < 1:
            raise ConfigError("n_stacks must be >= 1")
        if self.downsample_mode not in DOWNSAMPLE_MODES:
            raise ConfigError(f"downsample_mode must be one of {DOWNSAMPLE_MODES}")
        step = 2 ** self.hourglass.depth
        if self.resolution < step or self.resolution % step:
            raise ConfigError(
                f"resolution {self.resolution} is not divisible by 2**depth = {step}")


@dataclass
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 64

    def validate(self):
        if not 2 <= self.n_layers <= 4:
            raise ConfigError(f"discriminator n_layers must be in [2, 4], got {self.n_layers}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def config_from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


class Residual(nn.Module):
    """Pre-activation bottleneck: 1x1 -> 3x3 -> 1x1 with identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        mid = channels // 2
        self.body = nn.Sequential(
            nn.BatchNorm2d(channels), nn.ReLU(),
            nn.Conv2d(channels, mid, 1, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU(),
            nn.Conv2d(mid, mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU(),
            nn.Conv2d(mid, channels, 1, bias=False),
        )

    def forward(self, x):
        return x + self.body(x)


def _downsample(channels: int, mode: str) -> nn.Sequential:
    if mode == "max_pool":
        return nn.Sequential(nn.BatchNorm2d(channels), nn.ReLU(), nn.MaxPool2d(2))
    return nn.Sequential(
        nn.BatchNorm2d(channels), nn.ReLU(),
        nn.Conv2d(channels, channels, SAMPLE_KERNEL, stride=2, padding=SAMPLE_PADDING, bias=False))


def _upsample(channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.BatchNorm2d(channels), nn.ReLU(),
        nn.ConvTranspose2d(channels, channels, SAMPLE_KERNEL, stride=2,
                           padding=SAMPLE_PADDING, bias=False))


class FCHourglass(nn.Module):
    """One hourglass level; recurses ``depth`` times down to the bottleneck."""

    def __init__(self, depth: int, channels: int, mode: str = "strided_conv"):
        super().__init__()
        self.depth = depth
        self.skip = Residual(channels)
        self.down = _downsample(channels, mode)
        self.pre = Residual(channels)
        if depth > 1:
            self.inner = FCHourglass(depth - 1, channels, mode)
        else:
            self.inner = Residual(channels)
        self.up = _upsample(channels)

    def forward(self, x):
        low = self.inner(self.pre(self.down(x)))
        return self.skip(x) + self.up(low)


class StackedHourglassGenerator(nn.Module):
    """Maps ``image (+) joint map`` to one image prediction per stack."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        f = cfg.hourglass.feat_channels
        self.stem = nn.Conv2d(cfg.in_channels, f, 3, padding=1, bias=False)
        self.hourglasses = nn.ModuleList(
            FCHourglass(cfg.hourglass.depth, f, cfg.downsample_mode) for _ in range(cfg.n_stacks))
        self.heads = nn.ModuleList(
            nn.Sequential(nn.BatchNorm2d(f), nn.ReLU(), nn.Conv2d(f, f, 1, bias=False))
            for _ in range(cfg.n_stacks))
        self.to_image = nn.ModuleList(
            nn.Conv2d(f, cfg.image_channels, 1) for _ in range(cfg.n_stacks))
        # remaps between stacks; the last stack has none
        self.feat_remap = nn.ModuleList(
            nn.Conv2d(f, f, 1, bias=False) for _ in range(cfg.n_stacks - 1))
        self.pred_remap = nn.ModuleList(
            nn.Conv2d(cfg.image_channels, f, 1, bias=False) for _ in range(cfg.n_stacks - 1))

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        outputs = []
        for i in range(self.cfg.n_stacks):
            h = self.heads[i](self.hourglasses[i](x))
            pred = torch.tanh(self.to_image[i](h))
            outputs.append(pred)
            if i < self.cfg.n_stacks - 1:
                # module-level identity skip plus remapped features and prediction
                x = x + self.feat_remap[i](h) + self.pred_remap[i](pred)
        return outputs

    def bottleneck_resolution(self) -> int:
        return self.cfg.resolution // 2 ** self.cfg.hourglass.depth


class PatchDiscriminator(nn.Module):
    """Scores ``condition (+) candidate`` with a sigmoid patch map."""

    def __init__(self, cfg: DiscriminatorConfig, cond_channels: int, image_channels: int = 3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        c_in = cond_channels + image_channels
        for k in range(cfg.n_layers):
            c_out = cfg.base_channels * 2 ** k
            layers += [
                nn.Conv2d(c_in, c_out, SAMPLE_KERNEL, stride=2, padding=SAMPLE_PADDING, bias=False),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(0.2),
            ]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, condition, candidate):
        return torch.sigmoid(self.net(torch.cat([condition, candidate], dim=1)))


def receptive_field(n_layers: int) -> int:
    """Patch size of one discriminator score, by the standard backward recurrence."""
    rf = 3  # final 3x3, stride 1
    for _ in range(n_layers):
        rf = (rf - 1) * 2 + SAMPLE_KERNEL
    return rf


def score_map_size(resolution: int, n_layers: int) -> int:
    size = resolution
    for _ in range(n_layers):
        size = (size + 2 * SAMPLE_PADDING - SAMPLE_KERNEL) // 2 + 1
    return size


def build_generator(cfg: GeneratorConfig) -> StackedHourglassGenerator:
    return StackedHourglassGenerator(cfg)


def build_discriminator(cfg: DiscriminatorConfig, cond_channels: int,
                        image_channels: int = 3) -> PatchDiscriminator:
    return PatchDiscriminator(cfg, cond_channels, image_channels)


CONV_STD = 0.02


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Seeded in-place initialization.

    Convolution weights ~ N(0, 0.02); batch-norm scales ~ N(1, 0.02);
    every bias is zero.  Parameters are visited in registration order so the
    result depends only on (architecture, seed).
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                module.weight.normal_(0.0, CONV_STD, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.normal_(1.0, CONV_STD, generator=gen)
                module.bias.zero_()
                module.reset_running_stats()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
