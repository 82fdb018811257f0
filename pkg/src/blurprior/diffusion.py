"""Cosine noise schedule, forward noising, epsilon-prediction loss and DDIM sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

COSINE_OFFSET = 0.008
ALPHA_BAR_MIN = 1e-3
X0_CLIP = 6.0  # latents are unit-variance per channel


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: tuple[float, ...]  # index t-1 holds alpha_bar_t, t = 1..T

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    def at(self, t) -> torch.Tensor:
        """alpha_bar for integer timesteps 1..T (tensor in, float64 tensor out)."""
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return torch.tensor(self.alpha_bar, dtype=torch.float64)[t.long() - 1]


def cosine_alpha_bar(u: float, s: float = COSINE_OFFSET, floor: float = ALPHA_BAR_MIN) -> float:
    """alpha_bar at normalized time u in [0, 1]; 1 at u=0, ``floor`` at u=1."""
    f = math.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
    return floor + (1.0 - floor) * f / f0


def make_schedule(T: int = 1000) -> NoiseSchedule:
    """Cosine schedule with alpha_bar_1 = 1 and alpha_bar_T = 1e-3.

    Timestep t sits at normalized time (t - 1) / (T - 1); the 1e-3 floor keeps
    every value strictly positive.
    """
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    return NoiseSchedule(tuple(cosine_alpha_bar((t - 1) / (T - 1)) for t in range(1, T + 1)))


def _bcast(a: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return a.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise; ``t`` scalar or per-batch."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.at(t)
    if ab.ndim == 0:
        ab = ab.expand(x0.shape[0])
    ab = _bcast(ab, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


class DiffusionDiverged(FloatingPointError):
    pass


def denoise_loss(eps_model, x0: torch.Tensor, cond: dict, schedule: NoiseSchedule,
                 generator: torch.Generator, t: torch.Tensor | None = None,
                 noise: torch.Tensor | None = None, sample_ids=None) -> torch.Tensor:
    """Mean squared error between true and predicted noise at a random timestep.

    ``eps_model(x_t, t, **cond)`` returns the noise estimate.  ``t`` and
    ``noise`` may be fixed for gradient checks; otherwise they are drawn from
    ``generator``.
    """
    b = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, noise, schedule)
    eps_hat = eps_model(x_t, t, **cond)
    loss = ((eps_hat - noise) ** 2).mean()
    if not torch.isfinite(loss):
        raise DiffusionDiverged(f"non-finite diffusion loss at t={t.tolist()} samples={sample_ids}")
    return loss


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """``steps`` timesteps spaced uniformly from T down to 1 (just [T] for one step)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in 1..{T}")
    if steps == 1:
        return [T]
    ts = np.round(np.linspace(T, 1, steps)).astype(int)
    return [int(t) for t in ts]


@torch.no_grad()
def ddim_sample(eps_model, cond: dict, schedule: NoiseSchedule, steps: int, seed: int,
                shape: tuple[int, ...], clip: float | None = X0_CLIP,
                dtype=torch.float32) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from seeded Gaussian noise to a clean latent."""
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(shape, generator=gen, dtype=dtype)
    ts = ddim_timesteps(schedule.T, steps)
    b = shape[0]
    x0 = x
    for i, t in enumerate(ts):
        tt = torch.full((b,), t, dtype=torch.long)
        ab = schedule.alpha_bar[t - 1]
        eps = eps_model(x, tt, **cond)
        x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        if clip is not None:
            x0 = x0.clamp(-clip, clip)
        if not torch.isfinite(x0).all():
            raise DiffusionDiverged(f"non-finite latent at DDIM step {i} (t={t})")
        if i + 1 < len(ts):
            ab_next = schedule.alpha_bar[ts[i + 1] - 1]
            eps_dir = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
            x = math.sqrt(ab_next) * x0 + math.sqrt(1 - ab_next) * eps_dir
    return x0
