"""Deterministic convolutional autoencoder with a 2**k spatial compression factor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class CodecConfig:
    f: int = 8
    c_lat: int = 8
    width: int = 32
    max_width: int = 64
    in_channels: int = 3

    def __post_init__(self):
        if self.f < 2 or self.f & (self.f - 1):
            raise ValueError(f"compression factor must be a power of two >= 2, got {self.f}")
        if self.c_lat < 1:
            raise ValueError("c_lat must be >= 1")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.f))

    def to_dict(self):
        return asdict(self)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Down(nn.Module):
    """Stride-2 conv plus a parameter-free space-to-channel shortcut."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.group = cin * 4 // cout

    def forward(self, x):
        s = F.pixel_unshuffle(x, 2)
        s = s.unflatten(1, (-1, self.group)).mean(2)
        return self.conv(x) + s


class Up(nn.Module):
    """Channel-to-space upsampling with a repeat-channels shortcut."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout * 4, 3, padding=1)
        self.repeat = cout * 4 // cin

    def forward(self, x):
        s = x.repeat_interleave(self.repeat, dim=1)
        return F.pixel_shuffle(self.conv(x) + s, 2)


class Codec(nn.Module):
    """Space-to-channel autoencoder: pixel-unshuffle stem, stride-2 stages, no attention.

    Latents handed to callers are normalized with per-channel statistics
    recorded by :meth:`fit_normalization`; the buffers default to identity.
    """

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CodecConfig()
        n = cfg.n_down - 1
        chans = [min(cfg.width * 2 ** i, cfg.max_width) for i in range(n + 1)]
        enc = [nn.PixelUnshuffle(2), nn.Conv2d(cfg.in_channels * 4, chans[0], 3, padding=1)]
        for i in range(n):
            enc += [ResBlock(chans[i]), Down(chans[i], chans[i + 1])]
        enc += [ResBlock(chans[-1]), nn.SiLU(), nn.Conv2d(chans[-1], cfg.c_lat, 1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.c_lat, chans[-1], 3, padding=1), ResBlock(chans[-1])]
        for i in reversed(range(n)):
            dec += [Up(chans[i + 1], chans[i]), ResBlock(chans[i])]
        dec += [nn.SiLU(), nn.Conv2d(chans[0], cfg.in_channels * 4, 3, padding=1), nn.PixelShuffle(2)]
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("lat_mean", torch.zeros(cfg.c_lat))
        self.register_buffer("lat_std", torch.ones(cfg.c_lat))

    @property
    def f(self) -> int:
        return self.cfg.f

    def _check(self, h, w):
        if h % self.f or w % self.f:
            raise ValueError(f"image {h}x{w} not divisible by compression factor {self.f}")

    def encode_raw(self, image: torch.Tensor) -> torch.Tensor:
        self._check(*image.shape[-2:])
        return self.encoder(image * 2.0 - 1.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return (self.decoder(z) + 1.0) / 2.0

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """N x C x H x W image -> normalized N x c_lat x H/f x W/f latent."""
        z = self.encode_raw(image)
        return (z - self.lat_mean[:, None, None]) / self.lat_std[:, None, None]

    def decode(self, latent: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if latent.ndim != 4 or latent.shape[1] != self.cfg.c_lat:
            raise ValueError(f"latent shape {tuple(latent.shape)} does not match c_lat={self.cfg.c_lat}")
        z = latent * self.lat_std[:, None, None] + self.lat_mean[:, None, None]
        out = self.decode_raw(z)
        return out.clamp(0.0, 1.0) if clamp else out

    @torch.no_grad()
    def fit_normalization(self, images: torch.Tensor, batch: int = 64) -> None:
        zs = torch.cat([self.encode_raw(images[i:i + batch]) for i in range(0, len(images), batch)])
        self.lat_mean.copy_(zs.mean(dim=(0, 2, 3)))
        self.lat_std.copy_(zs.std(dim=(0, 2, 3)).clamp_min(1e-6))


def gradient_difference_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    gx = (pred[..., :, 1:] - pred[..., :, :-1]) - (target[..., :, 1:] - target[..., :, :-1])
    gy = (pred[..., 1:, :] - pred[..., :-1, :]) - (target[..., 1:, :] - target[..., :-1, :])
    return 0.5 * (gx.abs().mean() + gy.abs().mean())


def codec_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.l1_loss(recon, target) + 0.1 * gradient_difference_loss(recon, target)


class NonFiniteLoss(FloatingPointError):
    pass


def codec_train_step(codec: Codec, batch: torch.Tensor, optimizer: torch.optim.Optimizer) -> float:
    """One optimizer step on L1 + 0.1 x gradient-difference reconstruction loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    codec.train()
    recon = codec.decode_raw(codec.encode_raw(batch))
    loss = codec_loss(recon, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"codec loss is {loss.item()} (batch min {batch.min():.3g}, max {batch.max():.3g})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def bilinear_baseline(images: torch.Tensor, f: int) -> torch.Tensor:
    """Downsample by ``f`` then upsample back, both bilinear."""
    h, w = images.shape[-2:]
    small = F.interpolate(images, size=(h // f, w // f), mode="bilinear", align_corners=False, antialias=True)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)


def train_codec(images: torch.Tensor, cfg: CodecConfig | None = None, steps: int = 2000,
                batch_size: int = 16, lr: float = 2e-3, seed: int = 0, log_every: int = 0):
    """Train a codec on an N x C x H x W stack; returns ``(codec, losses)``."""
    torch.manual_seed(seed)
    codec = Codec(cfg)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.05)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for step in range(steps):
        idx = torch.randint(len(images), (batch_size,), generator=gen)
        batch = images[idx]
        flips = torch.randint(2, (2,), generator=gen)
        if flips[0]:
            batch = batch.flip(-1)
        if flips[1]:
            batch = batch.flip(-2)
        losses.append(codec_train_step(codec, batch, opt))
        sched.step()
        if log_every and step % log_every == 0:
            print(f"codec step {step} loss {losses[-1]:.4f}")
    codec.eval()
    codec.fit_normalization(images)
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec, losses
