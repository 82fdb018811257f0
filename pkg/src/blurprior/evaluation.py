"""Restoration metrics, cross-pattern matrices and rank-averaged model scores."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .blur import DatasetManifest
from .checkpoint import checkpoint_hash, load_checkpoint
from .images import read_image, to_image, to_tensor

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA = np.array([0.299, 0.587, 0.114])
REPORT_SCHEMA_VERSION = "1"


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img[:, :, :3] @ LUMA


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-covered positions."""
    n = len(k)
    h, w = x.shape
    rows = sum(k[i] * x[i:h - n + 1 + i] for i in range(n))
    return sum(k[i] * rows[:, i:w - n + 1 + i] for i in range(n))


def ssim(a, b, win: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on luma, Gaussian 11x11 window (sigma 1.5), valid region only."""
    a, b = _check_pair(a, b)
    x, y = to_luma(a), to_luma(b)
    if x.shape[0] < win or x.shape[1] < win:
        raise ValueError(f"image {x.shape} smaller than the {win}x{win} SSIM window")
    k = np.exp(-0.5 * ((np.arange(win) - win // 2) / sigma) ** 2)
    k /= k.sum()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def sharpness_proxy(a) -> float:
    """Variance of the 3x3 Laplacian response on luma (valid region)."""
    x = to_luma(a)
    h, w = x.shape
    if h < 3 or w < 3:
        return 0.0
    resp = sum(LAPLACIAN[i, j] * x[i:h - 2 + i, j:w - 2 + j] for i in range(3) for j in range(3))
    return float(np.var(resp))


# --- reports -------------------------------------------------------------

@dataclass
class MetricReport:
    model_id: str
    dataset_id: str
    per_sample: list[dict]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_sample:
            raise ValueError("metric report needs at least one sample")

    @property
    def aggregate(self) -> dict:
        keys = [k for k in self.per_sample[0] if k != "id"]
        return {f"mean_{k}": float(np.mean([r[k] for r in self.per_sample])) for k in keys}

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "per_sample": self.per_sample,
            "aggregate": self.aggregate,
            "provenance": self.provenance,
        }


def evaluate_manifest(model, manifest_path, steps: int = 20, seed: int = 0, batch_size: int = 16,
                      model_id: str = "model", provenance: dict | None = None,
                      use_captions: bool = True, limit: int | None = None) -> MetricReport:
    """Deblur every sample of a manifest and score it against its sharp image."""
    from .pipeline import deblur_batch

    p = Path(manifest_path)
    manifest = DatasetManifest.load(p / "manifest.json" if p.is_dir() else p)
    samples = manifest.samples[:limit] if limit else manifest.samples
    records = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        blurred = torch.cat([to_tensor(read_image(manifest.resolve(s.blurred_path))) for s in chunk])
        caps = [s.caption for s in chunk] if use_captions and model.cfg.toggles.text else None
        out = deblur_batch(model, blurred, caps, steps=steps, seed=seed + start)
        for i, s in enumerate(chunk):
            restored = to_image(out[i:i + 1])
            sharp = read_image(manifest.resolve(s.sharp_path))
            records.append({
                "id": s.id,
                "psnr_db": psnr(restored, sharp),
                "ssim": ssim(restored, sharp),
                "sharpness_proxy": sharpness_proxy(restored),
                "input_psnr_db": psnr(read_image(manifest.resolve(s.blurred_path)), sharp),
            })
    return MetricReport(model_id, str(manifest_path), records, dict(provenance or {}, seed=seed, steps=steps))


def write_report(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def text_table(rows: list[list], header: list[str]) -> str:
    cells = [header] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# --- cross-pattern matrix ------------------------------------------------

@dataclass
class CrossMatrix:
    rows: list[str]  # training families
    cols: list[str]  # test families
    cells: dict[tuple[str, str], tuple[float, float]]  # (psnr, ssim)

    def __post_init__(self):
        missing = [(r, c) for r in self.rows for c in self.cols if (r, c) not in self.cells]
        if missing:
            raise ValueError(f"cross matrix missing cells {missing}")

    def is_diagonal(self, r: str, c: str) -> bool:
        return r == c

    def generalization_gap(self) -> dict[str, float]:
        """Per training family: diagonal PSNR minus mean off-diagonal PSNR."""
        gaps = {}
        for r in self.rows:
            if r not in self.cols:
                continue
            off = [self.cells[(r, c)][0] for c in self.cols if c != r]
            if off:
                gaps[r] = self.cells[(r, r)][0] - float(np.mean(off))
        return gaps

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "cells": [{"train": r, "test": c, "psnr_db": self.cells[(r, c)][0],
                       "ssim": self.cells[(r, c)][1], "diagonal": self.is_diagonal(r, c)}
                      for r in self.rows for c in self.cols],
            "generalization_gap_db": self.generalization_gap(),
        }

    def to_text(self) -> str:
        rows = [[r] + [f"{self.cells[(r, c)][0]:.2f}/{self.cells[(r, c)][1]:.3f}" + ("*" if r == c else "")
                       for c in self.cols] for r in self.rows]
        return text_table(rows, ["train \\ test"] + self.cols)


def cross_matrix(models: dict, test_manifests: dict, steps: int = 20, seed: int = 0,
                 limit: int | None = None) -> tuple[CrossMatrix, dict[tuple[str, str], MetricReport]]:
    """Score every model on every test family.

    ``models`` maps family to a checkpoint (path, :class:`Checkpoint` or loaded model).
    """
    from .model import DeblurModel, model_from_checkpoint

    cells, reports = {}, {}
    for r, m in models.items():
        prov = {}
        if isinstance(m, (str, Path)):
            prov["ckpt_hash"] = checkpoint_hash(m)
            m = load_checkpoint(m)
        model = m if isinstance(m, DeblurModel) else model_from_checkpoint(m)
        for c, path in test_manifests.items():
            try:
                rep = evaluate_manifest(model, path, steps=steps, seed=seed, model_id=r,
                                        provenance=prov, limit=limit)
            except Exception as exc:
                raise RuntimeError(f"cross-matrix cell (train={r}, test={c}) failed: {exc}") from exc
            agg = rep.aggregate
            cells[(r, c)] = (agg["mean_psnr_db"], agg["mean_ssim"])
            reports[(r, c)] = rep
    return CrossMatrix(list(models), list(test_manifests), cells), reports


# --- rank scores ---------------------------------------------------------

@dataclass
class RankScore:
    model: str
    score: float  # mean rank; lower is better
    per_metric: dict[str, float]


def average_ranks(values: list[float], higher_is_better: bool) -> list[float]:
    """1-based ranks with ties sharing their mean rank."""
    keyed = [(-v if higher_is_better else v) for v in values]
    order = sorted(range(len(values)), key=lambda i: keyed[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and keyed[order[j + 1]] == keyed[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def rank_scores(results: dict[str, dict[str, float]], directions: dict[str, str]) -> dict[str, RankScore]:
    """Rank models per metric (respecting direction), then average each model's ranks."""
    models = list(results)
    for m in models:
        missing = set(directions) - set(results[m])
        if missing:
            raise ValueError(f"model {m!r} lacks metrics {sorted(missing)}")
    per_model = {m: {} for m in models}
    for metric, direction in directions.items():
        if direction not in ("higher", "lower"):
            raise ValueError(f"direction for {metric!r} must be 'higher' or 'lower'")
        ranks = average_ranks([results[m][metric] for m in models], direction == "higher")
        for m, r in zip(models, ranks):
            per_model[m][metric] = r
    return {m: RankScore(m, float(np.mean(list(per_model[m].values()))), per_model[m]) for m in models}
