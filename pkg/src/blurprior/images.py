"""PNG I/O and the procedural texture source used for desk-scale datasets."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def read_image(path) -> np.ndarray:
    """Load an image as an H x W x C float32 array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def quantize(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write an H x W (x C) array in [0, 1] as an 8-bit PNG."""
    q = quantize(image)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x C array -> 1 x C x H x W float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """1 x C x H x W (or C x H x W) tensor -> H x W x C float32 array."""
    t = tensor.detach().cpu()
    if t.ndim == 4:
        t = t[0]
    return t.permute(1, 2, 0).numpy().astype(np.float32)


# --- procedural textures -------------------------------------------------

_COLOR_NAMES = {
    "red": (0.85, 0.2, 0.15),
    "green": (0.2, 0.7, 0.25),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
    "white": (0.92, 0.92, 0.92),
    "black": (0.08, 0.08, 0.08),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.55, 0.2, 0.7),
    "gray": (0.5, 0.5, 0.5),
    "cyan": (0.2, 0.8, 0.85),
}


def _soft_mask(signed_dist: np.ndarray, softness: float) -> np.ndarray:
    # signed_dist < 0 inside
    return 1.0 / (1.0 + np.exp(np.clip(signed_dist / softness, -40, 40)))


def make_texture(rng: np.random.Generator, size: int = 64, n_shapes: tuple[int, int] = (4, 9)):
    """Draw a piecewise-smooth RGB scene of soft-edged shapes on a gradient.

    Returns ``(image, caption)`` where the caption names the drawn shapes, so
    the semantic path has something to condition on.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    names = list(_COLOR_NAMES)
    bg_a, bg_b = rng.choice(names, size=2, replace=False)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = ((xx * np.cos(ang) + yy * np.sin(ang)) / size + 1.0) / 2.0
    ramp = np.clip(ramp, 0, 1)[..., None]
    img = (1 - ramp) * np.array(_COLOR_NAMES[bg_a]) + ramp * np.array(_COLOR_NAMES[bg_b])
    img = 0.6 * img + 0.2

    words = []
    for _ in range(int(rng.integers(n_shapes[0], n_shapes[1] + 1))):
        kind = rng.choice(["ellipse", "box", "stripes", "ring"])
        cname = rng.choice(names)
        color = np.array(_COLOR_NAMES[cname]) * rng.uniform(0.8, 1.0)
        cx, cy = rng.uniform(0, size, 2)
        rx, ry = rng.uniform(0.08, 0.3, 2) * size
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        softness = rng.uniform(0.4, 1.0)
        if kind == "ellipse":
            r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
            dist = (r - 1.0) * min(rx, ry)
            alpha = _soft_mask(dist, softness)
        elif kind == "ring":
            r = np.sqrt((u / rx) ** 2 + (v / rx) ** 2)
            dist = np.abs(r - 1.0) * rx - rng.uniform(1.0, 2.5)
            alpha = _soft_mask(dist, softness)
        elif kind == "box":
            dist = np.maximum(np.abs(u) - rx, np.abs(v) - ry)
            alpha = _soft_mask(dist, softness)
        else:
            box = _soft_mask(np.maximum(np.abs(u) - rx, np.abs(v) - ry), softness)
            period = rng.uniform(5.0, 10.0)
            alpha = box * (0.5 + 0.5 * np.sin(2 * np.pi * u / period))
        img = (1 - alpha[..., None]) * img + alpha[..., None] * color
        words.append(f"{cname} {kind}")
    caption = f"{' and '.join(words[:3])} on {bg_a} {bg_b} gradient"
    return np.clip(img, 0, 1).astype(np.float32), caption


def write_textures(out_dir, count: int, size: int = 64, seed: int = 0) -> dict[str, str]:
    """Materialize ``count`` textures as PNGs plus ``captions.json``; returns captions."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    captions = {}
    for i in range(count):
        img, caption = make_texture(rng, size)
        stem = f"tex{i:05d}"
        write_image(out / f"{stem}.png", img)
        captions[stem] = caption
    (out / "captions.json").write_text(json.dumps(captions, indent=2, sort_keys=True))
    return captions
