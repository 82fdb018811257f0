"""Desk-scale data-strategy comparison: pretrain-then-finetune vs direct vs mixed.

Every arm gets the same total iteration budget.  The pretraining arm spends the
first half on a multi-angle set and the second half fine-tuning on the target
(single-angle) set; the direct arm spends it all on the target set; the mixed
arm trains from scratch on an equal-weight union of both sets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blur import BlurSpec, build_dataset
from .evaluation import evaluate_manifest, text_table
from .images import write_textures
from .model import model_from_checkpoint
from .pipeline import TrainConfig, load_pairs, run_bpp, run_finetune, run_mixed

log = logging.getLogger(__name__)

ARMS = ("bpp_ft", "direct", "mixed")


@dataclass
class AblationSetup:
    size: int = 32
    n_train: int = 400
    n_test: int = 64
    magnitude_px: float = 4.0
    pretrain_angles: tuple[float, ...] = (0.0, 45.0, 90.0, 135.0)
    target_angle: float = 0.0
    cross_angle: float = 90.0
    budget: int = 600
    batch_size: int = 8
    lr: float = 5e-4
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_steps: int = 10
    # cosine-decay the single-stage arms too, so no arm is favoured by annealing alone
    anneal_single_stage: bool = True
    model: dict = field(default_factory=lambda: {
        "dit": {"d_model": 64, "n_heads": 4, "n_blocks": 4},
        "motion_width": 16,
    })


def build_ablation_data(root, setup: AblationSetup, data_seed: int = 100) -> dict[str, Path]:
    """Texture pools and the four manifests: pretrain, target, test_target, test_cross."""
    root = Path(root)

    def linear(angle):
        return BlurSpec("linear", angle, setup.magnitude_px)

    pools = {
        "pretrain": (setup.n_train, data_seed, [linear(a) for a in setup.pretrain_angles]),
        "target": (setup.n_train, data_seed + 1, [linear(setup.target_angle)]),
        "test_target": (setup.n_test, data_seed + 2, [linear(setup.target_angle)]),
        "test_cross": (setup.n_test, data_seed + 2, [linear(setup.cross_angle)]),
    }
    out = {}
    for name, (count, seed, specs) in pools.items():
        src = root / f"tex_{seed}"
        if not (src / "captions.json").exists():
            write_textures(src, count, setup.size, seed)
        caps = json.loads((src / "captions.json").read_text())
        if not (root / name / "manifest.json").exists():
            build_dataset(root / name, src, specs, caps, seed=seed)
        out[name] = root / name / "manifest.json"
    return out


def _cfg(stage, datasets, iterations, setup, seed, **kw) -> TrainConfig:
    return TrainConfig(stage=stage, datasets=datasets, iterations=iterations, batch_size=setup.batch_size,
                       lr=setup.lr, seed=seed, model=dict(setup.model), **kw)


def train_arms(data: dict[str, Path], codec, setup: AblationSetup, seed: int, out_dir=None) -> dict:
    """Train the three arms for one seed; returns arm -> Checkpoint (plus 'bpp' for stage 1)."""
    sets = {k: load_pairs(data[k]) for k in ("pretrain", "target")}
    half = setup.budget // 2
    pre = {"path": str(data["pretrain"]), "weight": 1.0}
    tgt = {"path": str(data["target"]), "weight": 1.0}
    ckpts = {}
    ckpts["bpp"] = run_bpp(_cfg("bpp", [pre], half, setup, seed), codec, [sets["pretrain"]])
    ckpts["bpp_ft"] = run_finetune(_cfg("finetune", [tgt], setup.budget - half, setup, seed),
                                   ckpts["bpp"], [sets["target"]])
    single = {"lr_schedule": "cosine"} if setup.anneal_single_stage else {}
    ckpts["direct"] = run_bpp(_cfg("bpp", [tgt], setup.budget, setup, seed, **single), codec, [sets["target"]])
    ckpts["direct"].meta["provenance"][-1]["arm"] = "direct"
    mix = [dict(pre, weight=0.5), dict(tgt, weight=0.5)]
    ckpts["mixed"] = run_mixed(_cfg("mixed", mix, setup.budget, setup, seed, **single), codec,
                               [sets["pretrain"], sets["target"]])
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        for k, c in ckpts.items():
            save_checkpoint(c, Path(out_dir) / f"seed{seed}_{k}.ckpt")
    return ckpts


def score(ckpt, manifest, setup: AblationSetup, seed: int = 0) -> dict:
    model = model_from_checkpoint(ckpt)
    agg = evaluate_manifest(model, manifest, steps=setup.eval_steps, seed=seed).aggregate
    return {"psnr_db": agg["mean_psnr_db"], "ssim": agg["mean_ssim"], "input_psnr_db": agg["mean_input_psnr_db"]}


@dataclass
class AblationResult:
    setup: dict
    per_seed: list[dict]  # seed -> arm -> test -> metrics

    def median(self, arm: str, test: str, metric: str = "psnr_db") -> float:
        return float(np.median([r[arm][test][metric] for r in self.per_seed]))

    def summary(self) -> dict:
        return {arm: {t: self.median(arm, t) for t in ("target", "cross")} for arm in ARMS + ("bpp",)}

    def to_dict(self) -> dict:
        return {"setup": self.setup, "per_seed": self.per_seed, "median_psnr_db": self.summary()}

    def to_text(self) -> str:
        s = self.summary()
        rows = [[arm, s[arm]["target"], s[arm]["cross"]] for arm in s]
        return text_table(rows, ["arm", "target_psnr_db", "cross_psnr_db"])


def run_ablation(root, codec, setup: AblationSetup | None = None, save_checkpoints: bool = False) -> AblationResult:
    setup = setup or AblationSetup()
    root = Path(root)
    data = build_ablation_data(root / "data", setup)
    per_seed = []
    for seed in setup.seeds:
        ckpts = train_arms(data, codec, setup, seed, root / "ckpt" if save_checkpoints else None)
        rec = {"seed": seed}
        for arm, ck in ckpts.items():
            rec[arm] = {"target": score(ck, data["test_target"], setup),
                        "cross": score(ck, data["test_cross"], setup)}
            log.info("seed %d %s target %.3f cross %.3f", seed, arm,
                     rec[arm]["target"]["psnr_db"], rec[arm]["cross"]["psnr_db"])
        per_seed.append(rec)
    return AblationResult(asdict(setup), per_seed)
