"""Training stages (blur-pattern pretraining, fine-tuning, mixed baseline) and inference."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .blur import DatasetManifest
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import Codec, NonFiniteLoss
from .diffusion import DiffusionDiverged, NoiseSchedule, ddim_sample, denoise_loss, make_schedule
from .images import read_image, to_image, to_tensor
from .motion import axial_motion_loss
from .model import DeblurModel, ModelConfig, codec_from_checkpoint, model_from_checkpoint
from .semantic import CaptionEmbedding, EmbedderConfig, batch_tokens, embed_caption, null_embedding

log = logging.getLogger(__name__)

STAGES = ("bpp", "finetune", "mixed")
LOSS_WEIGHTS = {"pixel": 1.0, "motion": 0.1, "diffusion": 1.0}


class ConfigError(ValueError):
    """Invalid training configuration (CLI exit code 2)."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss during training (CLI exit code 3)."""

    def __init__(self, message, last_good: Checkpoint | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class DatasetRef:
    path: str
    weight: float = 1.0


@dataclass
class TrainConfig:
    stage: str
    datasets: list[DatasetRef]
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    toggles: dict = field(default_factory=lambda: {"pre_restore": True, "motion": True, "text": True})
    codec: str | None = None
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    lr_schedule: str | None = None  # default: constant for bpp/mixed, cosine for finetune
    caption_dropout: float = 0.1
    grad_clip: float = 1.0
    T: int = 1000
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    def __post_init__(self):
        self.datasets = [d if isinstance(d, DatasetRef) else DatasetRef(**d) for d in self.datasets]
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        if any(not d.weight > 0 for d in self.datasets):
            raise ConfigError("dataset weights must be positive")
        total = sum(d.weight for d in self.datasets)
        for d in self.datasets:
            d.weight = d.weight / total
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.caption_dropout <= 1.0:
            raise ConfigError("caption_dropout must be in [0, 1]")
        unknown = set(self.toggles) - {"pre_restore", "motion", "text"}
        if unknown:
            raise ConfigError(f"unknown module toggles {sorted(unknown)}")
        if self.lr_schedule not in (None, "constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def schedule_kind(self) -> str:
        return self.lr_schedule or ("cosine" if self.stage == "finetune" else "constant")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        env = os.environ.get("GLOW_SEED")
        if env is not None:
            try:
                cfg.seed = int(env)
            except ValueError as exc:
                raise ConfigError(f"GLOW_SEED must be an integer, got {env!r}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_dict(d)
        base = Path(path).parent
        for ref in cfg.datasets:
            if not Path(ref.path).is_absolute():
                ref.path = str(base / ref.path)
        for attr in ("codec", "checkpoint_in", "checkpoint_out"):
            val = getattr(cfg, attr)
            if val and not Path(val).is_absolute():
                setattr(cfg, attr, str(base / val))
        return cfg


# --- data ----------------------------------------------------------------

@dataclass
class PairSet:
    """One manifest held in memory."""

    name: str
    blurred: torch.Tensor  # N x C x H x W
    sharp: torch.Tensor
    motion: torch.Tensor  # N x 2 mean offsets
    captions: list[CaptionEmbedding]
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def load_pairs(manifest_path, embedder: EmbedderConfig | None = None, embeddings=None) -> PairSet:
    p = Path(manifest_path)
    manifest = DatasetManifest.load(p / "manifest.json" if p.is_dir() else p)
    blurred, sharp, motion, caps, ids = [], [], [], [], []
    for s in manifest.samples:
        blurred.append(to_tensor(read_image(manifest.resolve(s.blurred_path))))
        sharp.append(to_tensor(read_image(manifest.resolve(s.sharp_path))))
        motion.append(s.trajectory_summary[:2])
        if embeddings is not None and s.id in embeddings:
            caps.append(embeddings[s.id])
        else:
            caps.append(embed_caption(s.caption, embedder))
        ids.append(s.id)
    return PairSet(str(manifest_path), torch.cat(blurred), torch.cat(sharp),
                   torch.tensor(motion, dtype=torch.float32), caps, ids)


class MixtureSampler:
    """Draws (dataset, sample) pairs with dataset chosen by mixture weight."""

    def __init__(self, sets: list[PairSet], weights: list[float], seed: int,
                 embedder: EmbedderConfig | None = None):
        self.sets = sets
        self.null = null_embedding(embedder)
        self.weights = np.asarray(weights, dtype=np.float64) / np.sum(weights)
        self.rng = np.random.default_rng(seed)
        self.counts = [0] * len(sets)

    def draw(self, batch_size: int) -> list[tuple[int, int]]:
        which = self.rng.choice(len(self.sets), size=batch_size, p=self.weights)
        out = []
        for d in which:
            self.counts[int(d)] += 1
            out.append((int(d), int(self.rng.integers(len(self.sets[d])))))
        return out

    def batch(self, batch_size: int, null_text: bool):
        picks = self.draw(batch_size)
        blurred = torch.stack([self.sets[d].blurred[i] for d, i in picks])
        sharp = torch.stack([self.sets[d].sharp[i] for d, i in picks])
        motion = torch.stack([self.sets[d].motion[i] for d, i in picks])
        caps = [self.sets[d].captions[i] for d, i in picks]
        if null_text:
            caps = [self.null] * len(caps)
        ids = [self.sets[d].ids[i] for d, i in picks]
        return blurred, sharp, motion, caps, ids


# --- training ------------------------------------------------------------

def training_losses(model: DeblurModel, schedule: NoiseSchedule, blurred, sharp, motion_mean,
                    text, text_mask, generator: torch.Generator, sample_ids=None,
                    t=None, noise=None) -> dict[str, torch.Tensor]:
    """Weighted sum of pixel L1, sign-free motion MAE and diffusion noise-MSE for one batch."""
    coarse, coarse_raw, shallow, field_ = model.conditions(blurred)
    losses = {}
    if model.pre is not None:
        losses["pixel"] = F.l1_loss(coarse_raw, sharp)
    if model.motion is not None:
        target = motion_mean[:, :, None, None].expand_as(field_)
        losses["motion"] = axial_motion_loss(field_, target)
    with torch.no_grad():
        z_sharp = model.codec.encode(sharp)
    z_coarse = model.codec.encode(coarse)
    cond = {"coarse_latent": z_coarse, "shallow": shallow, "motion": field_}
    if model.cfg.toggles.text and text is not None:
        cond.update(text=text, text_mask=text_mask)
    losses["diffusion"] = denoise_loss(model.denoiser, z_sharp, cond, schedule, generator,
                                       t=t, noise=noise, sample_ids=sample_ids)
    losses["total"] = sum(LOSS_WEIGHTS[k] * v for k, v in losses.items())
    return losses


@dataclass
class RunLog:
    losses: list[float] = field(default_factory=list)
    parts: list[dict] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    null_text_steps: int = 0
    sample_counts: list[int] = field(default_factory=list)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule_kind == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.iterations))
    return cfg.lr


def _rng_state(gen: torch.Generator, sampler: MixtureSampler, text_rng: np.random.Generator) -> dict:
    return {
        "torch_generator": gen.get_state().numpy().tolist(),
        "sampler": sampler.rng.bit_generator.state,
        "text_dropout": text_rng.bit_generator.state,
    }


def _json_safe(obj):
    return json.loads(json.dumps(obj, default=lambda o: int(o) if isinstance(o, np.integer) else str(o)))


def train(model: DeblurModel, cfg: TrainConfig, sets: list[PairSet] | None = None,
          meta: dict | None = None) -> tuple[Checkpoint, RunLog]:
    """Optimize ``model`` for ``cfg.iterations`` steps; returns the checkpoint and run log.

    Raises :class:`TrainingDiverged` carrying the last finite checkpoint when a
    loss goes non-finite.
    """
    torch.use_deterministic_algorithms(True)
    embedder = model.cfg.embedder
    if sets is None:
        sets = [load_pairs(d.path, embedder) for d in cfg.datasets]
    sampler = MixtureSampler(sets, [d.weight for d in cfg.datasets], seed=cfg.seed, embedder=embedder)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    text_rng = np.random.default_rng(cfg.seed + 2)
    schedule = make_schedule(cfg.T)
    params = list(model.trainable_parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    runlog = RunLog()
    meta = dict(meta or {})
    model.train()
    model.codec.eval()

    def snapshot():
        m = dict(meta)
        m["rng"] = _json_safe(_rng_state(gen, sampler, text_rng))
        return model.to_checkpoint(m)

    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    for step in range(cfg.iterations):
        lr = _lr_at(cfg, step)
        for g in opt.param_groups:
            g["lr"] = lr
        null_text = bool(text_rng.random() < cfg.caption_dropout)
        runlog.null_text_steps += int(null_text)
        blurred, sharp, motion, caps, ids = sampler.batch(cfg.batch_size, null_text)
        text, mask = batch_tokens(caps, embedder.max_tokens)
        try:
            parts = training_losses(model, schedule, blurred, sharp, motion, text, mask, gen, ids)
            if not torch.isfinite(parts["total"]):
                raise DiffusionDiverged(f"non-finite total loss at step {step}")
        except (DiffusionDiverged, NonFiniteLoss) as exc:
            if not all(torch.isfinite(p).all() for p in params):
                model.load_state_dict(last_good)
            raise TrainingDiverged(f"step {step}: {exc}", snapshot()) from exc
        opt.zero_grad(set_to_none=True)
        parts["total"].backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        runlog.losses.append(float(parts["total"].item()))
        runlog.parts.append({k: float(v.item()) for k, v in parts.items() if k != "total"})
        runlog.lrs.append(lr)
        if (step + 1) % 100 == 0:
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
        if (step + 1) % 500 == 0 or step + 1 == cfg.iterations:
            log.info("step %d loss %.4f lr %.2e", step + 1, runlog.losses[-1], lr)
    runlog.sample_counts = list(sampler.counts)
    model.eval()
    return snapshot(), runlog


def _provenance_record(cfg: TrainConfig, runlog: RunLog) -> dict:
    return {
        "stage": cfg.stage,
        "datasets": [{"path": d.path, "weight": d.weight} for d in cfg.datasets],
        "seed": cfg.seed,
        "iterations": cfg.iterations,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "lr_schedule": cfg.schedule_kind,
        "lr_first": runlog.lrs[0],
        "lr_last": runlog.lrs[-1],
        "toggles": dict(cfg.toggles),
        "caption_dropout": cfg.caption_dropout,
        "null_text_steps": runlog.null_text_steps,
        "sample_counts": runlog.sample_counts,
        "first_losses": runlog.losses[:10],
        "final_loss": runlog.losses[-1],
        "compute_backend": f"torch {torch.__version__} cpu deterministic",
    }


def _resolve_codec(cfg: TrainConfig, codec: Codec | None) -> Codec:
    if codec is not None:
        return codec
    if not cfg.codec:
        raise ConfigError("a pretrained codec checkpoint is required (config field 'codec')")
    return codec_from_checkpoint(load_checkpoint(cfg.codec))


def build_model(cfg: TrainConfig, codec: Codec) -> DeblurModel:
    mcfg = dict(cfg.model)
    mcfg["toggles"] = {**{"pre_restore": True, "motion": True, "text": True}, **cfg.toggles}
    torch.manual_seed(cfg.seed)
    return DeblurModel(ModelConfig.from_dict(mcfg), codec)


def _finish(ckpt: Checkpoint, cfg: TrainConfig, runlog: RunLog, lineage: list[dict]) -> Checkpoint:
    ckpt.meta["provenance"] = list(lineage)
    ckpt.append_provenance(_provenance_record(cfg, runlog))
    ckpt.meta["train_config"] = _json_safe(cfg.to_dict())
    ckpt.meta["run_log"] = {"losses": runlog.losses, "lrs_head": runlog.lrs[:3], "lrs_tail": runlog.lrs[-3:]}
    if cfg.checkpoint_out:
        save_checkpoint(ckpt, cfg.checkpoint_out)
    return ckpt


def _run(cfg: TrainConfig, model: DeblurModel, lineage: list[dict], sets=None) -> Checkpoint:
    try:
        ckpt, runlog = train(model, cfg, sets)
    except TrainingDiverged as exc:
        if cfg.checkpoint_out and exc.last_good is not None:
            exc.last_good.meta["provenance"] = list(lineage)
            save_checkpoint(exc.last_good, cfg.checkpoint_out)
        raise
    return _finish(ckpt, cfg, runlog, lineage)


def run_bpp(cfg: TrainConfig, codec: Codec | None = None, sets=None) -> Checkpoint:
    """Stage 1: joint training from scratch on blur-pattern-diverse data."""
    if cfg.stage != "bpp":
        raise ConfigError(f"run_bpp needs stage='bpp', got {cfg.stage!r}")
    model = build_model(cfg, _resolve_codec(cfg, codec))
    return _run(cfg, model, [], sets)


def run_finetune(cfg: TrainConfig, init: Checkpoint | None = None, sets=None) -> Checkpoint:
    """Stage 2: continue from ``init`` on the target mixture (cosine lr decay by default)."""
    if cfg.stage != "finetune":
        raise ConfigError(f"run_finetune needs stage='finetune', got {cfg.stage!r}")
    if init is None:
        if not cfg.checkpoint_in:
            raise ConfigError("finetune needs an initial checkpoint")
        init = load_checkpoint(cfg.checkpoint_in)
    lineage = list(init.meta.get("provenance", []))
    if not any(r.get("stage") == "bpp" for r in lineage):
        warnings.warn("fine-tuning a checkpoint without blur-pattern pretraining in its provenance",
                      stacklevel=2)
    model = model_from_checkpoint(init)
    wanted = {**{"pre_restore": True, "motion": True, "text": True}, **cfg.toggles}
    if asdict(model.cfg.toggles) != wanted:
        raise ConfigError(f"toggles {wanted} differ from the initial checkpoint's {asdict(model.cfg.toggles)}")
    for p in model.trainable_parameters():
        p.requires_grad_(True)
    return _run(cfg, model, lineage, sets)


def run_mixed(cfg: TrainConfig, codec: Codec | None = None, sets=None) -> Checkpoint:
    """Single-stage training from scratch on the union of all datasets (ablation control)."""
    if cfg.stage != "mixed":
        raise ConfigError(f"run_mixed needs stage='mixed', got {cfg.stage!r}")
    if len(cfg.datasets) < 2:
        raise ConfigError("mixed training needs at least two datasets")
    model = build_model(cfg, _resolve_codec(cfg, codec))
    return _run(cfg, model, [], sets)


# --- inference -----------------------------------------------------------

def _pad_to(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


@torch.no_grad()
def deblur_batch(model: DeblurModel, blurred: torch.Tensor, captions=None, steps: int = 20,
                 seed: int = 0, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Restore an N x C x H x W batch.

    The sampled latent is decoded and applied as a correction on top of the
    coarse estimate, ``coarse + decode(z) - decode(encode(coarse))``, so codec
    reconstruction error cancels instead of capping output fidelity.
    """
    model.eval()
    schedule = schedule or make_schedule(1000)
    x, (h, w) = _pad_to(blurred, model.stride)
    coarse, _, shallow, motion = model.conditions(x)
    z_coarse = model.codec.encode(coarse)
    cond = {"coarse_latent": z_coarse, "shallow": shallow, "motion": motion}
    if captions is not None:
        if not model.cfg.toggles.text:
            warnings.warn("model was trained without text guidance; caption ignored", stacklevel=2)
        else:
            caps = [c if isinstance(c, CaptionEmbedding) else embed_caption(c or "", model.cfg.embedder)
                    for c in captions]
            cond["text"], cond["text_mask"] = batch_tokens(caps, model.cfg.embedder.max_tokens)
    elif model.cfg.toggles.text:
        cond["text"], cond["text_mask"] = batch_tokens([null_embedding(model.cfg.embedder)] * len(x))
    z = ddim_sample(model.denoiser, cond, schedule, steps, seed, tuple(z_coarse.shape))
    out = coarse + model.codec.decode(z, clamp=False) - model.codec.decode(z_coarse, clamp=False)
    return out.clamp(0, 1)[..., :h, :w]


def deblur(image: np.ndarray, ckpt, caption: str | None = None, steps: int = 20, seed: int = 0) -> np.ndarray:
    """H x W x C image in [0, 1] -> restored image of the same size."""
    model = ckpt if isinstance(ckpt, DeblurModel) else model_from_checkpoint(
        ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt))
    captions = None if caption is None else [caption]
    out = deblur_batch(model, to_tensor(image), captions, steps, seed)
    return to_image(out)
