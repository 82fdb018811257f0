"""Coarse restoration UNet built from activation-free blocks.

The nonlinearity is a SimpleGate (split channels, multiply halves) and channel
attention is a single linear mix of the spatially pooled descriptor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class PreRestoreConfig:
    width: int = 16
    depth: int = 1
    n_stages: int = 3
    shallow_feature_channels: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if self.width % 2:
            raise ValueError("width must be even")
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")

    def to_dict(self):
        return asdict(self)


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """X * Y for the two channel halves of an N x C x H x W tensor."""
    if x.shape[1] % 2:
        raise ValueError(f"simple_gate needs an even channel count, got {x.shape[1]}")
    a, b = x.chunk(2, dim=1)
    return a * b


def sca(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Scale each channel by ``weight @ avgpool(x) + bias``."""
    c = x.shape[1]
    if weight.shape != (c, c) or bias.shape != (c,):
        raise ValueError(f"SCA weights {tuple(weight.shape)}/{tuple(bias.shape)} do not match {c} channels")
    pooled = x.mean(dim=(2, 3))
    gain = pooled @ weight.T + bias
    return x * gain[:, :, None, None]


class SimplifiedChannelAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(channels, channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    def forward(self, x):
        return sca(x, self.weight, self.bias)


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an N x C x H x W tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        y = (x - mu) / torch.sqrt(var + self.eps)
        return y * self.weight[:, None, None] + self.bias[:, None, None]


class NAFBlock(nn.Module):
    def __init__(self, c: int, expand: int = 2):
        super().__init__()
        dw = c * expand
        self.norm1 = LayerNorm2d(c)
        self.expand1 = nn.Conv2d(c, dw, 1)
        self.dwconv = nn.Conv2d(dw, dw, 3, padding=1, groups=dw)
        self.sca = SimplifiedChannelAttention(dw // 2)
        self.project1 = nn.Conv2d(dw // 2, c, 1)

        self.norm2 = LayerNorm2d(c)
        self.expand2 = nn.Conv2d(c, c * expand, 1)
        self.project2 = nn.Conv2d(c * expand // 2, c, 1)

        # residual scales start at zero so a fresh block is the identity
        self.beta = nn.Parameter(torch.zeros(1, c, 1, 1))
        self.gamma = nn.Parameter(torch.zeros(1, c, 1, 1))

    def forward(self, x):
        y = self.norm1(x)
        y = self.dwconv(self.expand1(y))
        y = self.sca(simple_gate(y))
        x = x + self.project1(y) * self.beta

        y = simple_gate(self.expand2(self.norm2(x)))
        return x + self.project2(y) * self.gamma


def naf_block(x: torch.Tensor, block: NAFBlock) -> torch.Tensor:
    return block(x)


class PreRestore(nn.Module):
    """UNet of NAF blocks predicting a residual on top of the blurred input.

    ``forward`` returns ``(coarse, shallow)``: the clamped coarse estimate and
    the full-resolution first-stage features used for condition fusion.
    """

    def __init__(self, cfg: PreRestoreConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PreRestoreConfig()
        w = cfg.width
        self.intro = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = w
        for _ in range(cfg.n_stages - 1):
            self.encoders.append(nn.Sequential(*[NAFBlock(ch) for _ in range(cfg.depth)]))
            self.downs.append(nn.Conv2d(ch, ch * 2, 2, stride=2))
            ch *= 2
        self.middle = nn.Sequential(*[NAFBlock(ch) for _ in range(cfg.depth)])
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for _ in range(cfg.n_stages - 1):
            self.ups.append(nn.Sequential(nn.Conv2d(ch, ch * 2, 1, bias=False), nn.PixelShuffle(2)))
            ch //= 2
            self.decoders.append(nn.Sequential(*[NAFBlock(ch) for _ in range(cfg.depth)]))
        self.ending = nn.Conv2d(w, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.ending.weight)
        nn.init.zeros_(self.ending.bias)
        if cfg.shallow_feature_channels != w:
            self.shallow_proj = nn.Conv2d(w, cfg.shallow_feature_channels, 1)
        else:
            self.shallow_proj = nn.Identity()

    @property
    def stride(self) -> int:
        return 2 ** (self.cfg.n_stages - 1)

    def forward(self, blurred: torch.Tensor, clamp: bool = True):
        h, w = blurred.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"input {h}x{w} must be divisible by {self.stride}; pad to "
                f"{-(-h // self.stride) * self.stride}x{-(-w // self.stride) * self.stride}")
        x = self.intro(blurred)
        skips = []
        shallow = None
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            if shallow is None:
                shallow = x
            skips.append(x)
            x = down(x)
        x = self.middle(x)
        if shallow is None:
            shallow = x
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(up(x) + skip)
        coarse = blurred + self.ending(x)
        if clamp:
            coarse = coarse.clamp(0.0, 1.0)
        return coarse, self.shallow_proj(shallow)


def pre_restore_forward(blurred: torch.Tensor, model: PreRestore):
    return model(blurred)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.l1_loss(pred, target)
