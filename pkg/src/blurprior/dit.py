"""Linear-attention diffusion transformer and condition fusion.

Attention uses the ReLU kernel: with phi = ReLU, the output for query i is
phi(Q_i) S / (phi(Q_i) z + eps), where S = sum_j phi(K_j)^T V_j and
z = sum_j phi(K_j)^T are shared by every query, so cost is linear in tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-6


@dataclass
class DiTConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 6
    mlp_ratio: float = 2.0
    text_dim: int = 32
    use_text: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self):
        return asdict(self)


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, eps: float = EPS,
                     key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """ReLU-kernel attention over the last two axes (``... x N x d``).

    ``key_mask`` (``... x N_k``, 1 = keep) drops padded keys from both sums.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    qf = F.relu(q)
    kf = F.relu(k)
    if key_mask is not None:
        kf = kf * key_mask[..., None].to(kf.dtype)
    kv = kf.transpose(-1, -2) @ v              # d x d_v, once
    ksum = kf.sum(dim=-2, keepdim=True)        # 1 x d, once
    num = qf @ kv
    den = (qf * ksum).sum(dim=-1, keepdim=True)
    return num / (den + eps)


def reference_attention(q, k, v, eps: float = EPS) -> np.ndarray:
    """Unfactorized form: build every query-key weight, then normalize per query.

    Operates on 2-D ``N x d`` arrays in float64; quadratic in N by design.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"{k.shape[0]} keys but {v.shape[0]} values")
    weights = np.maximum(q, 0.0) @ np.maximum(k, 0.0).T    # N_q x N_k pair weights
    return (weights @ v) / (weights.sum(axis=1, keepdims=True) + eps)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


def pos_embedding_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed sin-cos embedding, half the channels per axis; returns (h*w) x dim."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        out = coord[:, None] * omega[None]
        parts += [torch.sin(out), torch.cos(out)]
    emb = torch.cat(parts, dim=1)
    if emb.shape[1] < dim:
        emb = F.pad(emb, (0, dim - emb.shape[1]))
    return emb.to(torch.get_default_dtype())


class LinearSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.h, d // self.h).permute(2, 0, 3, 1, 4)
        out = linear_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class LinearCrossAttention(nn.Module):
    def __init__(self, d: int, text_dim: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.text_dim = text_dim
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(text_dim, 2 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x, text, text_mask=None):
        if text.shape[-1] != self.text_dim:
            raise ValueError(f"text tokens have dim {text.shape[-1]}, expected {self.text_dim}")
        b, n, d = x.shape
        m = text.shape[1]
        q = self.q(x).view(b, n, self.h, d // self.h).transpose(1, 2)
        k, v = self.kv(text).view(b, m, 2, self.h, d // self.h).permute(2, 0, 3, 1, 4)
        mask = None if text_mask is None else text_mask[:, None, :]
        out = linear_attention(q, k, v, key_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    """adaLN self-attention, optional text cross-attention, adaLN MLP; gates start at zero."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        d = cfg.d_model
        self.use_text = cfg.use_text
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.attn = LinearSelfAttention(d, cfg.n_heads)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, d))
        n_mod = 6
        if cfg.use_text:
            self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
            self.cross = LinearCrossAttention(d, cfg.text_dim, cfg.n_heads)
            n_mod = 9
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, n_mod * d))
        nn.init.zeros_(self.ada[-1].weight)
        nn.init.zeros_(self.ada[-1].bias)

    def forward(self, x, c, text=None, text_mask=None):
        mods = self.ada(c).chunk(9 if self.use_text else 6, dim=-1)
        sh1, sc1, g1, sh3, sc3, g3 = mods[:6]
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), sh1, sc1))
        if self.use_text and text is not None:
            sh2, sc2, g2 = mods[6:]
            x = x + g2[:, None] * self.cross(modulate(self.norm2(x), sh2, sc2), text, text_mask)
        x = x + g3[:, None] * self.mlp(modulate(self.norm3(x), sh3, sc3))
        return x


def dit_block(tokens, t_emb, text_tokens, block: DiTBlock, text_mask=None):
    return block(tokens, t_emb, text_tokens, text_mask)


class ConditionFusion(nn.Module):
    """Concatenate latent, coarse latent, pooled shallow features and pooled motion; project to tokens."""

    def __init__(self, c_lat: int, shallow_channels: int, use_motion: bool, d_model: int):
        super().__init__()
        self.c_lat = c_lat
        self.shallow_channels = shallow_channels
        self.use_motion = use_motion
        c_in = 2 * c_lat + shallow_channels + (2 if use_motion else 0)
        self.proj = nn.Linear(c_in, d_model)
        self.d_model = d_model

    def forward(self, latent, coarse_latent, shallow=None, motion=None):
        b, _, hl, wl = latent.shape
        parts = [latent, coarse_latent]
        for name, fm in (("shallow", shallow), ("motion", motion)):
            if fm is None:
                continue
            h, w = fm.shape[-2:]
            if h % hl or w % wl or h // hl != w // wl:
                raise ValueError(f"{name} features {h}x{w} inconsistent with latent {hl}x{wl}")
            parts.append(F.avg_pool2d(fm, h // hl))
        x = torch.cat(parts, dim=1)
        if x.shape[1] != self.proj.in_features:
            raise ValueError(f"fused {x.shape[1]} channels, projection expects {self.proj.in_features}")
        tokens = self.proj(x.flatten(2).transpose(1, 2))
        return tokens + pos_embedding_2d(hl, wl, self.d_model).to(tokens)


def fuse_conditions(latent, shallow, motion, fusion: ConditionFusion, coarse_latent=None):
    if coarse_latent is None:
        coarse_latent = torch.zeros_like(latent)
    return fusion(latent, coarse_latent, shallow, motion)


class Denoiser(nn.Module):
    """Predicts the noise in a latent from fused conditions, timestep and optional text."""

    def __init__(self, cfg: DiTConfig, c_lat: int, shallow_channels: int, use_motion: bool):
        super().__init__()
        self.cfg = cfg
        self.c_lat = c_lat
        d = cfg.d_model
        self.fusion = ConditionFusion(c_lat, shallow_channels, use_motion, d)
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList([DiTBlock(cfg) for _ in range(cfg.n_blocks)])
        if cfg.use_text:
            # learned stand-in for captionless samples (rows whose text mask is all zero)
            self.null_text = nn.Parameter(torch.zeros(1, 1, cfg.text_dim))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.out = nn.Linear(d, c_lat)
        for m in (self.final_ada[-1], self.out):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, x_t, t, coarse_latent, shallow=None, motion=None, text=None, text_mask=None):
        b, _, hl, wl = x_t.shape
        tokens = self.fusion(x_t, coarse_latent, shallow, motion)
        c = self.t_mlp(timestep_embedding(t, self.cfg.d_model))
        if not self.cfg.use_text:
            text = None
        elif text is not None:
            text, text_mask = self._fill_null(text, text_mask)
        for blk in self.blocks:
            tokens = blk(tokens, c, text, text_mask)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        out = self.out(modulate(self.final_norm(tokens), shift, scale))
        return out.transpose(1, 2).reshape(b, self.c_lat, hl, wl)

    def _fill_null(self, text, text_mask):
        b = text.shape[0]
        if text_mask is None:
            return text, None
        empty = text_mask.sum(dim=1) == 0
        if not bool(empty.any()):
            return text, text_mask
        first = torch.where(empty[:, None, None], self.null_text.expand(b, 1, -1).to(text), text[:, :1])
        text = torch.cat([first, text[:, 1:]], dim=1)
        head = torch.where(empty, torch.ones_like(text_mask[:, 0]), text_mask[:, 0])
        return text, torch.cat([head[:, None], text_mask[:, 1:]], dim=1)
