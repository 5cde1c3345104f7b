"""
Residual Dense-Net (RDN) and Residual Squeeze-and-Excitation (RSE) blocks.

All tensors are channels-first, ``(B, C, H, W)``. None of the blocks here
change the spatial size of their input; only the RDN block changes the
channel count (it grows by ``growth`` channels through dense concatenation).
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigError, InvalidInputError

BN_MOMENTUM = 0.01  # torch convention; equals a 0.99 moving-average decay
BN_EPS = 1e-3


def global_avg_pool(x):
    """Squeeze step: mean over the two trailing spatial axes.

    Works on ``(C, H, W)`` and ``(B, C, H, W)`` inputs and returns ``(C,)`` or
    ``(B, C)`` respectively.
    """
    if x.dim() < 3:
        raise InvalidInputError(f"expected a (.., C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[-1] * x.shape[-2] == 0:
        raise InvalidInputError(f"degenerate spatial size {tuple(x.shape[-2:])}")
    return x.mean(dim=(-2, -1))


def se_gate(v, w1, w2, b1=None, b2=None):
    """Excitation step: ``sigmoid(W2 relu(W1 v + b1) + b2)``.

    ``w1`` has shape ``(C // r, C)`` and ``w2`` ``(C, C // r)``, the layout of
    :class:`torch.nn.Linear` weights. ``v`` may be ``(C,)`` or ``(B, C)``.
    """
    if w1.dim() != 2 or w2.dim() != 2:
        raise ConfigError("gate weights must be matrices")
    if v.shape[-1] != w1.shape[1]:
        raise ConfigError(f"channel vector has length {v.shape[-1]}, gate expects {w1.shape[1]}")
    if w2.shape != (w1.shape[1], w1.shape[0]):
        raise ConfigError(f"output gate weights {tuple(w2.shape)} do not match hidden weights {tuple(w1.shape)}")
    hidden = F.relu(F.linear(v, w1, b1))
    return torch.sigmoid(F.linear(hidden, w2, b2))


def se_recalibrate(x, u):
    """Scale every channel of ``x`` by the matching entry of ``u``."""
    if u.shape[-1] != x.shape[-3]:
        raise InvalidInputError(f"gate has {u.shape[-1]} entries but the map has {x.shape[-3]} channels")
    return x * u[..., None, None]


class Dropout(nn.Module):
    """Inverted dropout that draws its masks from an explicit generator.

    ``generator`` is left as ``None`` until the owner assigns one (see
    :func:`set_dropout_generator`); in that case torch's default generator is used.
    """

    def __init__(self, p=0.1):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.generator = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.empty_like(x).bernoulli_(1.0 - self.p, generator=self.generator)
        return x * keep / (1.0 - self.p)

    def extra_repr(self):
        return f"p={self.p}"


def set_dropout_generator(module, generator):
    for m in module.modules():
        if isinstance(m, Dropout):
            m.generator = generator


def _conv(in_ch, out_ch, kernel_size):
    return nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2)


def _bn(ch):
    return nn.BatchNorm2d(ch, eps=BN_EPS, momentum=BN_MOMENTUM)


class CompositeH(nn.Sequential):
    """BatchNorm -> ReLU -> Conv -> Dropout, the dense unit of the RDN block."""

    def __init__(self, in_ch, out_ch, kernel_size=3, dropout=0.1):
        super().__init__(
            _bn(in_ch), nn.ReLU(), _conv(in_ch, out_ch, kernel_size), Dropout(dropout)
        )


class ConvDropBN(nn.Sequential):
    """Conv -> Dropout -> BatchNorm, optionally followed by ReLU."""

    def __init__(self, ch, kernel_size=3, dropout=0.1, relu=True):
        layers = [_conv(ch, ch, kernel_size), Dropout(dropout), _bn(ch)]
        if relu:
            layers.append(nn.ReLU())
        super().__init__(*layers)


class SEGate(nn.Module):
    """Two fully-connected layers ``C -> C/r -> C`` computing channel weights."""

    def __init__(self, channels, reduction_ratio=2, bias=True):
        super().__init__()
        if reduction_ratio < 1:
            raise ConfigError(f"reduction ratio must be positive, got {reduction_ratio}")
        if channels % reduction_ratio:
            raise ConfigError(f"{channels} channels are not divisible by r={reduction_ratio}")
        self.fc1 = nn.Linear(channels, channels // reduction_ratio, bias=bias)
        self.fc2 = nn.Linear(channels // reduction_ratio, channels, bias=bias)

    def forward(self, v):
        return se_gate(v, self.fc1.weight, self.fc2.weight, self.fc1.bias, self.fc2.bias)


class RDNBlock(nn.Module):
    """Dense sub-block followed by a residual sub-block.

    ``y_d = [H(x), x]`` has ``in_ch + growth`` channels; the block returns
    ``relu(bn(F(y_d) + y_d))`` where ``F`` is two Conv/Dropout/BN/ReLU layers
    that keep the width of ``y_d``.
    """

    def __init__(self, in_ch, growth, kernel_size=3, dropout=0.1):
        super().__init__()
        if in_ch < 1 or growth < 1:
            raise ConfigError(f"RDN block needs positive widths, got in={in_ch}, growth={growth}")
        self.in_channels = in_ch
        self.out_channels = in_ch + growth
        self.dense = CompositeH(in_ch, growth, kernel_size, dropout)
        self.residual = nn.Sequential(
            ConvDropBN(self.out_channels, kernel_size, dropout),
            ConvDropBN(self.out_channels, kernel_size, dropout),
        )
        self.bn = _bn(self.out_channels)

    def forward(self, x):
        y_d = torch.cat([self.dense(x), x], dim=1)
        return F.relu(self.bn(self.residual(y_d) + y_d))


class RSEBlock(nn.Module):
    """Channel-preserving ``relu(F(x) + x * gate(gap(x)))``."""

    def __init__(self, channels, reduction_ratio=2, kernel_size=3, dropout=0.1, fc_bias=True):
        super().__init__()
        self.in_channels = self.out_channels = channels
        self.residual = ConvDropBN(channels, kernel_size, dropout, relu=False)
        self.gate = SEGate(channels, reduction_ratio, bias=fc_bias)

    def forward(self, x):
        u = self.gate(global_avg_pool(x))
        return F.relu(self.residual(x) + se_recalibrate(x, u))


def init_weights(module, generator=None):
    """He-uniform convolutions/linear layers, zero biases, identity batch-norm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
