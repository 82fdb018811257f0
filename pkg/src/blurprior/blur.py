"""Pattern-controlled blur synthesis and blur-pattern statistics.

A blurred frame is the average of the sharp frame sampled at every offset of a
camera trajectory.  Offsets are sub-pixel, so samples are bilinear, and reads
outside the frame clamp to the nearest edge pixel.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .images import list_images, read_image, write_image

log = logging.getLogger(__name__)

MANIFEST_VERSION = "1"
FAMILIES = ("linear", "shake", "gaussian", "identity")


@dataclass(frozen=True)
class Trajectory:
    offsets: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.offsets) == 0:
            raise ValueError("trajectory needs at least one offset")
        arr = np.asarray(self.offsets, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"offsets must be (dx, dy) pairs, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("trajectory contains a non-finite offset")

    @classmethod
    def from_array(cls, arr) -> "Trajectory":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 2)
        return cls(tuple((float(x), float(y)) for x, y in arr))

    @property
    def n_samples(self) -> int:
        return len(self.offsets)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.offsets, dtype=np.float64)

    def mean_offset(self) -> tuple[float, float]:
        m = self.as_array().mean(axis=0)
        return float(m[0]), float(m[1])


@dataclass(frozen=True)
class BlurSpec:
    family: str
    angle_deg: float = 0.0
    magnitude_px: float = 0.0
    sigma: float = 0.0
    n_samples: int | None = None  # None: 2 ceil(magnitude) + 1 for trajectories, else 1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples is None:
            auto = 2 * math.ceil(self.magnitude_px) + 1 if self.family in ("linear", "shake") else 1
            object.__setattr__(self, "n_samples", int(auto))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown blur family {self.family!r}; expected one of {FAMILIES}")
        if not 0.0 <= self.angle_deg < 360.0:
            raise ValueError(f"angle_deg must be in [0, 360), got {self.angle_deg}")
        if self.magnitude_px < 0 or self.sigma < 0:
            raise ValueError("magnitude_px and sigma must be non-negative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.family == "identity" and self.magnitude_px != 0:
            raise ValueError("identity blur requires magnitude_px == 0")
        if self.family == "gaussian" and self.sigma <= 0:
            raise ValueError("gaussian blur requires sigma > 0")
        if self.family in ("linear", "shake") and self.magnitude_px <= 0:
            raise ValueError(f"{self.family} blur requires magnitude_px > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "BlurSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "BlurSpec":
        return BlurSpec(**{**asdict(self), "seed": int(seed)})


# --- rendering -----------------------------------------------------------

def _bilinear_clamped(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Sample ``img`` at (x + dx, y + dy) for every pixel, clamping to the frame."""
    h, w = img.shape[:2]
    xs = np.clip(np.arange(w, dtype=np.float64) + dx, 0.0, w - 1)
    ys = np.clip(np.arange(h, dtype=np.float64) + dy, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0)[None, :, None]
    wy = (ys - y0)[:, None, None]
    # lerp form a + w (b - a) returns a exactly when a == b, keeping flat regions flat
    a, b = img[y0][:, x0], img[y0][:, x1]
    top = a + wx * (b - a)
    a, b = img[y1][:, x0], img[y1][:, x1]
    bot = a + wx * (b - a)
    return top + wy * (bot - top)


def render_blur(sharp: np.ndarray, traj: Trajectory) -> np.ndarray:
    """Average the sharp image displaced by every trajectory offset."""
    if not isinstance(traj, Trajectory):
        traj = Trajectory.from_array(traj)
    arr = np.asarray(sharp, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    # running mean: exact for constant images and for a single offset
    out = np.zeros_like(arr)
    for n, (dx, dy) in enumerate(traj.offsets, 1):
        out += (_bilinear_clamped(arr, dx, dy) - out) / n
    return out[:, :, 0] if squeeze else out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), edge-clamped."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    h, w = arr.shape[:2]
    padded = np.pad(arr, ((r, r), (0, 0), (0, 0)), mode="edge")
    tmp = sum(k[i] * padded[i:i + h] for i in range(len(k)))
    padded = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = sum(k[i] * padded[:, i:i + w] for i in range(len(k)))
    return out[:, :, 0] if squeeze else out


def make_trajectory(spec: BlurSpec, rng_seed: int | None = None) -> Trajectory:
    """Camera trajectory for a linear, shake or identity spec; deterministic in the seed."""
    seed = spec.seed if rng_seed is None else rng_seed
    n = spec.n_samples
    if spec.family == "gaussian":
        raise ValueError("gaussian blur has no trajectory; use gaussian_blur")
    if spec.family == "identity":
        return Trajectory.from_array(np.zeros((n, 2)))
    theta = math.radians(spec.angle_deg)
    if spec.family == "linear":
        t = np.linspace(0.0, spec.magnitude_px, n)
        return Trajectory.from_array(np.stack([t * math.cos(theta), t * math.sin(theta)], axis=1))
    # shake: smooth-heading random walk with equal steps, total length = magnitude
    if n == 1:
        return Trajectory.from_array(np.zeros((1, 2)))
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    turns = rng.normal(0.0, 0.6, size=n - 1)
    heading = theta + np.cumsum(turns)
    step = spec.magnitude_px / (n - 1)
    steps = np.stack([np.cos(heading), np.sin(heading)], axis=1) * step
    return Trajectory.from_array(np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)]))


def apply_spec(sharp: np.ndarray, spec: BlurSpec) -> tuple[np.ndarray, Trajectory | None]:
    if spec.family == "gaussian":
        return gaussian_blur(sharp, spec.sigma), None
    traj = make_trajectory(spec)
    return render_blur(sharp, traj), traj


# --- datasets ------------------------------------------------------------

def sample_seed(master_seed: int, sample_id: str) -> int:
    digest = hashlib.blake2b(f"{int(master_seed)}:{sample_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def trajectory_summary(spec: BlurSpec) -> tuple[float, float, float]:
    """(mean_dx, mean_dy, dominant_angle_deg) of the spec's trajectory."""
    if spec.family == "gaussian":
        return (0.0, 0.0, 0.0)
    mdx, mdy = make_trajectory(spec).mean_offset()
    if math.hypot(mdx, mdy) < 1e-12:
        return (0.0, 0.0, 0.0)
    return (mdx, mdy, math.degrees(math.atan2(mdy, mdx)) % 360.0)


@dataclass
class Sample:
    id: str
    blurred_path: str
    sharp_path: str
    caption: str
    spec: BlurSpec
    trajectory_summary: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "blurred_path": self.blurred_path,
            "sharp_path": self.sharp_path,
            "caption": self.caption,
            "spec": self.spec.to_dict(),
            "trajectory_summary": list(self.trajectory_summary),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(
            id=d["id"],
            blurred_path=d["blurred_path"],
            sharp_path=d["sharp_path"],
            caption=d.get("caption", ""),
            spec=BlurSpec(**d["spec"]),
            trajectory_summary=tuple(d["trajectory_summary"]),
        )


@dataclass
class DatasetManifest:
    version: str
    seed: int
    samples: list[Sample]
    log: list[str] = field(default_factory=list)
    root: Path | None = None  # directory the sample paths are relative to

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in manifest")

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "seed": self.seed,
            "samples": [s.to_dict() for s in self.samples],
            "log": self.log,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if str(d.get("version")) != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        return cls(
            version=str(d["version"]),
            seed=int(d["seed"]),
            samples=[Sample.from_dict(s) for s in d["samples"]],
            log=list(d.get("log", [])),
            root=path.parent,
        )

    def validate(self, tol: float = 1e-6) -> None:
        for s in self.samples:
            for rel in (s.blurred_path, s.sharp_path):
                if not self.resolve(rel).exists():
                    raise FileNotFoundError(f"{s.id}: missing {rel}")
            expect = trajectory_summary(s.spec)
            if max(abs(a - b) for a, b in zip(expect, s.trajectory_summary)) > tol:
                raise ValueError(f"{s.id}: trajectory summary disagrees with its spec")


def build_dataset(out_dir, source_images, specs, captions=None, seed: int = 0,
                  workers: int = 1) -> DatasetManifest:
    """Blur every source image with the specs taken round-robin and write a manifest.

    Each sample's RNG seed is derived from (seed, sample id), so the result is
    independent of processing order.  Unreadable sources are skipped and noted
    in the manifest log.
    """
    specs = [s if isinstance(s, BlurSpec) else BlurSpec.from_dict(s) for s in specs]
    if not specs:
        raise ValueError("need at least one BlurSpec")
    out = Path(out_dir)
    (out / "sharp").mkdir(parents=True, exist_ok=True)
    (out / "blurred").mkdir(parents=True, exist_ok=True)
    captions = captions or {}
    sources = list_images(source_images)

    def materialize(item):
        i, src = item
        sid = src.stem
        spec = specs[i % len(specs)].with_seed(sample_seed(seed, sid))
        try:
            sharp = read_image(src)
        except Exception as exc:  # noqa: BLE001 - any decode failure skips the sample
            return None, f"skipped {src.name}: {exc.__class__.__name__}: {exc}"
        blurred, _ = apply_spec(sharp, spec)
        write_image(out / "sharp" / f"{sid}.png", sharp)
        write_image(out / "blurred" / f"{sid}.png", blurred)
        caption = captions.get(sid, captions.get(src.name, ""))
        return Sample(sid, f"blurred/{sid}.png", f"sharp/{sid}.png", caption, spec,
                      trajectory_summary(spec)), None

    items = list(enumerate(sources))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(materialize, items))
    else:
        results = [materialize(it) for it in items]

    samples = [s for s, _ in results if s is not None]
    messages = [m for _, m in results if m is not None]
    for m in messages:
        log.warning(m)
    if not samples:
        raise ValueError(f"no usable source images in {source_images}")
    manifest = DatasetManifest(MANIFEST_VERSION, int(seed), samples, messages, root=out)
    manifest.save(out / "manifest.json")
    return manifest


# --- pattern statistics --------------------------------------------------

@dataclass
class PatternHistogram:
    angle_bins: list[tuple[float, int]]
    magnitude_bins: list[tuple[float, int]]
    locality_index: float

    def mode_angle(self) -> float:
        return max(self.angle_bins, key=lambda b: b[1])[0]

    def to_dict(self) -> dict:
        return {
            "angle_bins": [list(b) for b in self.angle_bins],
            "magnitude_bins": [list(b) for b in self.magnitude_bins],
            "locality_index": self.locality_index,
        }


def fold_angle(angle_deg: float) -> float:
    return float(angle_deg) % 180.0


def angle_histogram(angles_deg) -> list[tuple[float, int]]:
    """18 bins of 10 degrees centred on 0, 10, ..., 170 over directions mod 180."""
    counts = [0] * 18
    for a in angles_deg:
        counts[int(math.floor(fold_angle(a) / 10.0 + 0.5)) % 18] += 1
    return [(10.0 * i, c) for i, c in enumerate(counts)]


def magnitude_histogram(mags, width: float = 1.0) -> list[tuple[float, int]]:
    mags = list(mags)
    top = max(mags) if mags else 0.0
    n_bins = max(1, int(math.floor(top / width)) + 1)
    counts = [0] * n_bins
    for m in mags:
        counts[min(int(math.floor(m / width)), n_bins - 1)] += 1
    return [((i + 0.5) * width, c) for i, c in enumerate(counts)]


def locality_from_field(field: np.ndarray, grid: int = 10) -> float:
    """Fraction of the frame whose per-patch motion magnitude exceeds half the frame mean."""
    from .motion import patch_dominant_directions

    cells = patch_dominant_directions(field, grid).grid
    mags = np.hypot(cells[..., 0], cells[..., 1])
    return float(np.mean(mags > 0.5 * mags.mean()))


def pattern_stats(manifest_or_dir, use_ground_truth: bool = True, model=None,
                  grid: int = 10) -> PatternHistogram:
    """Orientation / magnitude histograms and locality index of a dataset.

    With ``use_ground_truth`` the stored trajectory summaries are used;
    otherwise ``model`` (a motion estimator with a ``predict`` method taking an
    H x W x C image and returning an H x W x 2 field) is run on every blurred image.
    """
    manifest = manifest_or_dir
    if not isinstance(manifest, DatasetManifest):
        p = Path(manifest_or_dir)
        manifest = DatasetManifest.load(p / "manifest.json" if p.is_dir() else p)
    if not use_ground_truth and model is None:
        raise ValueError("pattern_stats needs ground truth or a motion model")

    angles, mags, local = [], [], []
    for s in manifest.samples:
        if use_ground_truth:
            mdx, mdy, ang = s.trajectory_summary
            mag = s.spec.magnitude_px
            local.append(1.0 if mag > 0 else 0.0)
        else:
            fld = model.predict(read_image(manifest.resolve(s.blurred_path)))
            mdx, mdy = (float(v) for v in fld.reshape(-1, 2).mean(axis=0))
            ang = math.degrees(math.atan2(mdy, mdx))
            mag = 2.0 * math.hypot(mdx, mdy)
            local.append(locality_from_field(fld, grid))
        mags.append(mag)
        if math.hypot(mdx, mdy) > 1e-9:
            angles.append(ang)
    return PatternHistogram(angle_histogram(angles), magnitude_histogram(mags),
                            float(np.mean(local)) if local else 0.0)
