"""Dense motion-offset estimation from a single blurred frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blur import Trajectory
from .images import to_tensor


@dataclass
class PatchMotionGrid:
    grid: np.ndarray  # G x G x 2 mean (dx, dy) per patch

    @property
    def g(self) -> int:
        return self.grid.shape[0]


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GELU())


def structure_channels(images: torch.Tensor, gain: float = 300.0) -> torch.Tensor:
    """Per-pixel gradient products (gx^2, gy^2, gx*gy) of the channel mean.

    Blur flattens gradients along its direction, so these local structure-tensor
    entries expose the streak axis; ``gain`` brings them to unit-ish scale.
    """
    g = images.mean(dim=1, keepdim=True)
    gx = (F.pad(g, (1, 1, 0, 0), mode="replicate")[..., 2:] - F.pad(g, (1, 1, 0, 0), mode="replicate")[..., :-2]) / 2
    gy = (F.pad(g, (0, 0, 1, 1), mode="replicate")[..., 2:, :] - F.pad(g, (0, 0, 1, 1), mode="replicate")[..., :-2, :]) / 2
    return gain * torch.cat([gx * gx, gy * gy, gx * gy], 1)


class MotionNet(nn.Module):
    """Three-stage conv encoder-decoder with skips; small random output head.

    Output is an N x 2 x H x W field of (dx, dy) offsets in pixels.
    """

    def __init__(self, in_channels: int = 3, width: int = 24):
        super().__init__()
        w = width
        self.enc1 = nn.Sequential(_conv(in_channels + 3, w), _conv(w, w))
        self.enc2 = nn.Sequential(_conv(w, 2 * w, 2), _conv(2 * w, 2 * w))
        self.enc3 = nn.Sequential(_conv(2 * w, 4 * w, 2), _conv(4 * w, 4 * w), _conv(4 * w, 4 * w))
        self.dec2 = _conv(4 * w + 2 * w, 2 * w)
        self.dec1 = _conv(2 * w + w, w)
        self.head = nn.Conv2d(w, 2, 3, padding=1)
        # without normalization layers the default init shrinks activations ~4x per
        # stage and the net collapses to predicting the dataset-mean offset
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # small but nonzero: an exactly zero field is a stationary point of the sign-free loss
        nn.init.normal_(self.head.weight, std=1e-2)
        nn.init.zeros_(self.head.bias)

    stride = 4

    def forward(self, blurred: torch.Tensor) -> torch.Tensor:
        h, w = blurred.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"input {h}x{w} must be divisible by {self.stride}")
        x = torch.cat([blurred * 2.0 - 1.0, structure_channels(blurred)], 1)
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        # pooled context lets every position see the global streak statistics
        e3 = e3 + e3.mean(dim=(2, 3), keepdim=True)
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2, mode="nearest"), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], 1))
        return self.head(d1)

    @torch.no_grad()
    def predict(self, image: np.ndarray) -> np.ndarray:
        """H x W x C image -> H x W x 2 field (numpy), for pattern statistics."""
        self.eval()
        out = self(to_tensor(image))
        return out[0].permute(1, 2, 0).numpy()


def predict_motion(blurred: torch.Tensor, model: MotionNet) -> torch.Tensor:
    return model(blurred)


def motion_supervision_target(traj: Trajectory, dims: tuple[int, int]) -> np.ndarray:
    """Constant H x W x 2 field equal to the trajectory's mean offset."""
    mdx, mdy = traj.mean_offset()
    h, w = dims
    out = np.empty((h, w, 2), dtype=np.float64)
    out[..., 0] = mdx
    out[..., 1] = mdy
    return out


def motion_loss(pred, target):
    """Mean absolute error over every component of two equal-shape fields."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor):
        return (pred - target).abs().mean()
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def axial_motion_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample min of the MAE to ``target`` and to ``-target``, averaged over the batch.

    A single frame cannot tell a trajectory from its reverse, so either sign counts.
    """
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    pos = (pred - target).abs().flatten(1).mean(1)
    neg = (pred + target).abs().flatten(1).mean(1)
    return torch.minimum(pos, neg).mean()


def patch_dominant_directions(field: np.ndarray, g: int = 10) -> PatchMotionGrid:
    """Mean (dx, dy) over each cell of a g x g partition of an H x W x 2 field.

    Cell edges are at round(i * H / g), so sizes differ by at most one pixel
    when H is not a multiple of g.
    """
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[:2]
    if g < 1 or g > h or g > w:
        raise ValueError(f"grid {g} does not fit a {h}x{w} field")
    ys = np.round(np.linspace(0, h, g + 1)).astype(int)
    xs = np.round(np.linspace(0, w, g + 1)).astype(int)
    out = np.empty((g, g, 2))
    for i in range(g):
        for j in range(g):
            out[i, j] = field[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].reshape(-1, 2).mean(axis=0)
    return PatchMotionGrid(out)


def field_angle_deg(field) -> float:
    """Direction of the mean offset, degrees in [0, 360)."""
    f = np.asarray(field, dtype=np.float64).reshape(-1, 2).mean(axis=0)
    return math.degrees(math.atan2(f[1], f[0])) % 360.0


def axial_error_deg(a: float, b: float) -> float:
    """Angular distance between two unsigned directions (mod 180), in [0, 90]."""
    d = abs(a - b) % 180.0
    return min(d, 180.0 - d)


def render_overlay(image: np.ndarray, grid: PatchMotionGrid, scale: float = 2.0,
                   color=(1.0, 0.1, 0.1)) -> np.ndarray:
    """Draw one segment per patch, centred in the cell, of length ``scale`` x offset."""
    out = np.array(image, dtype=np.float64, copy=True)
    if out.ndim == 2:
        out = out[:, :, None]
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    h, w = out.shape[:2]
    g = grid.g
    for i in range(g):
        for j in range(g):
            cy, cx = (i + 0.5) * h / g, (j + 0.5) * w / g
            dx, dy = grid.grid[i, j] * scale / 2.0
            n = int(max(abs(dx), abs(dy)) * 2) + 2
            for s in np.linspace(-1.0, 1.0, n):
                y, x = int(round(cy + s * dy)), int(round(cx + s * dx))
                if 0 <= y < h and 0 <= x < w:
                    out[y, x] = color
    return out


def canonical_offsets(v: torch.Tensor) -> torch.Tensor:
    """Flip N x 2 offsets into the half-plane dy > 0 (or dy == 0, dx >= 0).

    A blurred frame cannot tell a trajectory from its reverse, so training
    targets are kept on one side of the axial ambiguity.
    """
    flip = (v[:, 1] < 0) | ((v[:, 1] == 0) & (v[:, 0] < 0))
    return torch.where(flip[:, None], -v, v)


def augment_motion(images: torch.Tensor, offsets: torch.Tensor, hflip: torch.Tensor, quarter_turns: torch.Tensor):
    """Mirror and rotate a batch, transforming its mean offsets to match.

    Mirroring x maps (dx, dy) to (-dx, dy); one counter-clockwise quarter turn of the
    array (``torch.rot90`` over H, W) maps (dx, dy) to (dy, -dx).
    """
    imgs, offs = [], []
    for img, v, f, k in zip(images, offsets, hflip.tolist(), quarter_turns.tolist()):
        if f:
            img, v = img.flip(-1), torch.stack([-v[0], v[1]])
        for _ in range(k):
            img, v = torch.rot90(img, 1, dims=(1, 2)), torch.stack([v[1], -v[0]])
        imgs.append(img)
        offs.append(v)
    return torch.stack(imgs), canonical_offsets(torch.stack(offs))


def train_motion(blurred: torch.Tensor, mean_offsets: torch.Tensor, steps: int = 1500, batch_size: int = 16,
                 lr: float = 1e-3, width: int = 24, seed: int = 0, augment: bool = True, crop: int | None = None,
                 log_every: int = 0):
    """Fit a standalone MotionNet to constant mean-offset targets; returns ``(model, losses)``.

    ``blurred`` is N x C x H x W (square when ``augment``), ``mean_offsets`` is N x 2
    (dx, dy) in pixels.  Augmentation mirrors and quarter-turns each batch so the
    network cannot key on image content; it maps a set of angles spaced by a divisor
    of 90 degrees onto itself.  ``crop`` trains on random square windows of that size;
    the target is a constant field, so any window keeps its label.
    """
    torch.manual_seed(seed)
    model = MotionNet(blurred.shape[1], width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    model.train()
    for step in range(steps):
        idx = torch.randint(len(blurred), (batch_size,), generator=gen)
        x, v = blurred[idx], mean_offsets[idx]
        if crop is not None:
            oy, ox = (int(torch.randint(n - crop + 1, (1,), generator=gen)) for n in x.shape[-2:])
            x = x[..., oy:oy + crop, ox:ox + crop]
        if augment:
            x, v = augment_motion(x, v, torch.randint(2, (batch_size,), generator=gen),
                                  torch.randint(4, (batch_size,), generator=gen))
        pred = model(x)
        loss = axial_motion_loss(pred, v[:, :, None, None].expand_as(pred))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"motion loss is {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.item()))
        if log_every and step % log_every == 0:
            print(f"motion step {step} loss {losses[-1]:.4f}")
    model.eval()
    return model, losses
