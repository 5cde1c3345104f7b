"""
Backbone Residual Dense sub-network, Fine-tune Tail sub-network and the
cascaded model.

Channel layout for ``base_channels = b``::

    level0..2   encoder  RDN -> RSE -> maxpool      widths b, 2b, 4b
    level3      latent   RDN -> RSE                 width 8b
    level4..6   decoder  up(2x2, s2) -> [up, skip] -> RDN -> RSE
                         up emits the skip's width w, RDN grows 2w -> 3w
    out         1x1 conv + sigmoid

    tail:  image_branch RDN->RSE (3 -> b)    map_branch RDN->RSE (1 -> b)
           concat (2b) -> stage0 (3b) -> stage1 (4b) -> 1x1 conv + sigmoid
"""
import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import RDNBlock, RSEBlock, init_weights, set_dropout_generator
from .exceptions import ConfigError, InvalidInputError

DEPTH = 3


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    depth: int = DEPTH
    reduction_ratio: int = 2
    dropout_rate: float = 0.1
    input_channels: int = 3
    tail_enabled: bool = True
    kernel_size: int = 3
    fc_bias: bool = True

    def __post_init__(self):
        if self.depth != DEPTH:
            raise ConfigError(f"depth is fixed at {DEPTH}, got {self.depth}")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if self.base_channels <= self.input_channels:
            raise ConfigError(
                f"base_channels ({self.base_channels}) must exceed input_channels ({self.input_channels})"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be positive")
        for width in self.rse_widths():
            if width % self.reduction_ratio:
                raise ConfigError(
                    f"channel width {width} is not divisible by r={self.reduction_ratio}; "
                    "pick base_channels accordingly"
                )

    def encoder_widths(self):
        """Widths of levels 0..depth (the last one is the latent level)."""
        return [self.base_channels * 2**k for k in range(self.depth + 1)]

    def decoder_widths(self):
        return [3 * w for w in reversed(self.encoder_widths()[: self.depth])]

    def tail_widths(self):
        b = self.base_channels
        return [b, b, 3 * b, 4 * b]

    def rse_widths(self):
        return self.encoder_widths() + self.decoder_widths() + self.tail_widths()

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Level(nn.Module):
    """RDN block followed by a transition RSE block, with an optional upsampler."""

    def __init__(self, in_ch, growth, cfg, up_from=None):
        super().__init__()
        if up_from is not None:
            # upsampler emits `in_ch // 2` channels; the skip supplies the other half
            self.up = nn.ConvTranspose2d(up_from, in_ch // 2, kernel_size=2, stride=2)
        else:
            self.up = None
        self.rdn = RDNBlock(in_ch, growth, cfg.kernel_size, cfg.dropout_rate)
        self.rse = RSEBlock(
            self.rdn.out_channels, cfg.reduction_ratio, cfg.kernel_size, cfg.dropout_rate, cfg.fc_bias
        )
        self.out_channels = self.rdn.out_channels

    def forward(self, x, skip=None):
        if self.up is not None:
            x = torch.cat([self.up(x), skip], dim=1)
        return self.rse(self.rdn(x))


class OutputBlock(nn.Module):
    def __init__(self, in_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, 1, kernel_size=1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


class Backbone(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.depth = cfg.depth
        widths = cfg.encoder_widths()
        in_ch = cfg.input_channels
        for k, w in enumerate(widths):
            self.add_module(f"level{k}", Level(in_ch, w - in_ch, cfg))
            in_ch = w
        below = widths[-1]
        for i, w in enumerate(reversed(widths[: cfg.depth])):
            level = Level(2 * w, w, cfg, up_from=below)
            self.add_module(f"level{cfg.depth + 1 + i}", level)
            below = level.out_channels
        self.out = OutputBlock(below)

    def levels(self):
        return [getattr(self, f"level{k}") for k in range(2 * self.depth + 1)]

    def forward(self, x):
        levels = self.levels()
        skips = []
        for level in levels[: self.depth]:
            x = level(x)
            skips.append(x)
            x = F.max_pool2d(x, kernel_size=2, stride=2)
        x = levels[self.depth](x)
        for level, skip in zip(levels[self.depth + 1 :], reversed(skips)):
            x = level(x, skip)
        return self.out(x)


class Tail(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        b = cfg.base_channels
        self.image_branch = Level(cfg.input_channels, b - cfg.input_channels, cfg)
        self.map_branch = Level(1, b - 1, cfg)
        self.stage0 = Level(2 * b, b, cfg)
        self.stage1 = Level(self.stage0.out_channels, b, cfg)
        self.out = OutputBlock(self.stage1.out_channels)

    def forward(self, image, coarse_map):
        if image.shape[-2:] != coarse_map.shape[-2:]:
            raise InvalidInputError(
                f"tail inputs differ in spatial size: {tuple(image.shape[-2:])} vs {tuple(coarse_map.shape[-2:])}"
            )
        x = torch.cat([self.image_branch(image), self.map_branch(coarse_map)], dim=1)
        return self.out(self.stage1(self.stage0(x)))


class DRVNet(nn.Module):
    """Backbone plus optional tail. ``forward`` returns ``(backbone_map, final_map)``."""

    def __init__(self, cfg, generator=None):
        super().__init__()
        self.config = cfg
        self.backbone = Backbone(cfg)
        self.tail = Tail(cfg) if cfg.tail_enabled else None
        self.backbone_frozen = False
        init_weights(self, generator)

    @property
    def divisor(self):
        return 2**self.config.depth

    def check_input(self, image):
        if image.dim() != 4:
            raise InvalidInputError(f"expected a (B, C, H, W) batch, got shape {tuple(image.shape)}")
        if image.shape[1] != self.config.input_channels:
            raise InvalidInputError(
                f"expected {self.config.input_channels} input channels, got {image.shape[1]}"
            )
        h, w = image.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise InvalidInputError(
                f"spatial size {h}x{w} must be divisible by {self.divisor}; zero-pad the image first"
            )

    def forward(self, image):
        self.check_input(image)
        backbone_map = self.backbone(image)
        if self.tail is None:
            return backbone_map, backbone_map
        return backbone_map, self.tail(image, backbone_map)

    def freeze_backbone(self):
        """Stop gradients into the backbone and pin its batch-norm statistics."""
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone_frozen = True
        self.backbone.eval()

    def train(self, mode=True):
        super().train(mode)
        if self.backbone_frozen:
            self.backbone.eval()
        return self

    def set_dropout_generator(self, generator):
        set_dropout_generator(self, generator)

    def tail_parameters(self):
        return [] if self.tail is None else list(self.tail.parameters())


def build_backbone(cfg, generator=None):
    """Backbone-only model (the tail is disabled regardless of ``cfg``)."""
    return DRVNet(dataclasses.replace(cfg, tail_enabled=False), generator)


def build_tail(cfg, generator=None):
    tail = Tail(cfg)
    init_weights(tail, generator)
    return tail


def build_model(cfg, generator=None):
    return DRVNet(cfg, generator)


def forward_full(model, image):
    """Run both sub-networks on a padded, normalised RGB batch."""
    return model(image)


def named_tensors(model):
    """Parameters and buffers keyed ``backbone/level0/rdn/...`` style."""
    return {name.replace(".", "/"): t for name, t in model.state_dict().items()}


def count_parameters(module, trainable_only=False):
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
