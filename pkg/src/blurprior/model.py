"""Full deblurring model: pre-restore, motion estimator, latent denoiser, frozen codec."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .checkpoint import Checkpoint, state_arrays
from .codec import Codec, CodecConfig
from .dit import Denoiser, DiTConfig
from .motion import MotionNet
from .pre_restore import PreRestore, PreRestoreConfig
from .semantic import EmbedderConfig


@dataclass
class ModuleToggles:
    pre_restore: bool = True
    motion: bool = True
    text: bool = True


@dataclass
class ModelConfig:
    toggles: ModuleToggles = field(default_factory=ModuleToggles)
    pre_restore: PreRestoreConfig = field(default_factory=PreRestoreConfig)
    dit: DiTConfig = field(default_factory=DiTConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    motion_width: int = 24

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        d = dict(d or {})
        toggles = ModuleToggles(**d.pop("toggles", {}))
        pre = PreRestoreConfig(**d.pop("pre_restore", {}))
        dit = dict(d.pop("dit", {}))
        dit["use_text"] = toggles.text
        emb = EmbedderConfig(**d.pop("embedder", {}))
        dit.setdefault("text_dim", emb.text_dim)
        return cls(toggles, pre, DiTConfig(**dit), emb, **d)


class DeblurModel(nn.Module):
    def __init__(self, cfg: ModelConfig, codec: Codec):
        super().__init__()
        self.cfg = cfg
        t = cfg.toggles
        self.pre = PreRestore(cfg.pre_restore) if t.pre_restore else None
        self.motion = MotionNet(width=cfg.motion_width) if t.motion else None
        shallow = cfg.pre_restore.shallow_feature_channels if t.pre_restore else 0
        self.denoiser = Denoiser(cfg.dit, codec.cfg.c_lat, shallow, t.motion)
        self.codec = codec
        for p in self.codec.parameters():
            p.requires_grad_(False)

    @property
    def stride(self) -> int:
        s = self.codec.f
        if self.pre is not None:
            s = max(s, self.pre.stride)
        if self.motion is not None:
            s = max(s, self.motion.stride)
        return s

    def trainable_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("codec."):
                yield p

    def conditions(self, blurred: torch.Tensor, clamp_coarse: bool = True):
        """Run the guidance branches; returns (coarse, coarse_raw, shallow, motion)."""
        if self.pre is not None:
            coarse_raw, shallow = self.pre(blurred, clamp=False)
            coarse = coarse_raw.clamp(0, 1) if clamp_coarse else coarse_raw
        else:
            coarse_raw, coarse, shallow = blurred, blurred, None
        motion = self.motion(blurred) if self.motion is not None else None
        return coarse, coarse_raw, shallow, motion

    def to_checkpoint(self, meta: dict) -> Checkpoint:
        arrays = {}
        for name in ("pre", "motion", "denoiser", "codec"):
            mod = getattr(self, name)
            if mod is not None:
                arrays.update(state_arrays(mod, f"{name}."))
        meta = dict(meta)
        meta["model_config"] = self.cfg.to_dict()
        meta["codec_config"] = self.codec.cfg.to_dict()
        return Checkpoint(arrays, meta)


def codec_from_checkpoint(ckpt: Checkpoint) -> Codec:
    codec = Codec(CodecConfig(**ckpt.meta["codec_config"]))
    codec.load_state_dict(ckpt.subset("codec."))
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec


def codec_checkpoint(codec: Codec, meta: dict | None = None) -> Checkpoint:
    meta = dict(meta or {})
    meta["codec_config"] = codec.cfg.to_dict()
    meta.setdefault("provenance", [])
    return Checkpoint(state_arrays(codec, "codec."), meta)


def model_from_checkpoint(ckpt: Checkpoint) -> DeblurModel:
    if "model_config" not in ckpt.meta:
        raise ValueError("checkpoint holds no deblurring model (codec-only?)")
    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    model = DeblurModel(cfg, codec_from_checkpoint(ckpt))
    for name in ("pre", "motion", "denoiser"):
        mod = getattr(model, name)
        if mod is not None:
            mod.load_state_dict(ckpt.subset(f"{name}."))
    model.eval()
    return model


def count_parameters(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())
