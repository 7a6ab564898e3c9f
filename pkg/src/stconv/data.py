"""Synthetic satellite-like sequences with future rain masks.

Each scene is a latent intensity field made of anisotropic Gaussian blobs
moving at constant velocity. The 11 input bands are affine, blurred copies
of the latent field over the first ``t_in`` frames; the target marks where
the latent field reaches ``rain_threshold`` over the next ``t_out`` frames,
cropped to the central ``H/crop x W/crop`` window.

Positions and velocities use (x, y) order: x runs along W, y along H.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .formats import CorruptFileError, read_tensor, write_tensor
from .tensor import crop_center_spatial

N_BANDS = 11
SPLITS = ("train", "val", "test")

# band 0 is the raw latent field; the rest mimic correlated VIS / WV / IR channels
BAND_GAINS = (1.0, 0.8, 0.6, 1.2, -0.7, 0.5, -0.9, 1.1, 0.4, -0.5, 0.9)
BAND_OFFSETS = (0.0, 0.1, -0.2, 0.05, 0.3, -0.1, 0.2, 0.0, -0.3, 0.15, -0.05)
BAND_BLUR = (0.0, 0.5, 1.0, 0.0, 1.5, 2.0, 0.5, 1.0, 2.5, 3.0, 0.0)


@dataclass(frozen=True)
class Blob:
    center: tuple  # (x, y) at frame 0
    velocity: tuple  # (vx, vy) px / frame
    radii: tuple  # Gaussian sigmas along the rotated (u, v) axes
    intensity: float = 1.0
    angle: float = 0.0  # radians, rotation of the u axis from +x

    def position(self, t: float) -> tuple[float, float]:
        return (self.center[0] + t * self.velocity[0], self.center[1] + t * self.velocity[1])


@dataclass(frozen=True)
class SceneSpec:
    height: int = 48
    width: int = 48
    t_in: int = 4
    t_out: int = 32
    crop_factor: int = 6
    rain_threshold: float = 0.5
    blobs: tuple | None = None  # fixed blobs shared by every sample; None draws random ones
    blob_count: tuple = (1, 1)
    speed_min: float = 0.5
    speed_max: float = 1.2
    radius_range: tuple = (2.5, 7.0)  # minor-axis sigma
    aspect_range: tuple = (1.0, 8.0)  # major / minor
    major_max: float = 35.0
    intensity_range: tuple = (0.8, 1.6)
    crossing_jitter: float = 6.0
    band_gains: tuple = BAND_GAINS
    band_offsets: tuple = BAND_OFFSETS
    band_blur: tuple = BAND_BLUR

    def __post_init__(self):
        if self.rain_threshold <= 0:
            raise ValueError(f"rain_threshold must be positive, got {self.rain_threshold}")
        if not (len(self.band_gains) == len(self.band_offsets) == len(self.band_blur) == N_BANDS):
            raise ValueError(f"band mixing needs {N_BANDS} gains, offsets and blur radii")
        if self.height % self.crop_factor or self.width % self.crop_factor:
            raise ValueError("grid extents must be divisible by crop_factor")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("speeds must satisfy 0 <= speed_min <= speed_max")

    @property
    def frames(self) -> int:
        return self.t_in + self.t_out

    def check_blob(self, blob: Blob) -> None:
        """Raise if the blob center leaves the grid within the horizon."""
        for t in (0, self.frames - 1):
            x, y = blob.position(t)
            if not (0 <= x <= self.width - 1 and 0 <= y <= self.height - 1):
                raise ValueError(f"blob escapes the {self.height}x{self.width} frame by t={t}: center ({x:.2f}, {y:.2f})")


@dataclass
class Dataset:
    x: np.ndarray  # (S, 11, t_in, H, W)
    y: np.ndarray  # (S, 1, t_out, H/crop, W/crop)
    ids: list = field(default_factory=list)
    splits: list = field(default_factory=list)

    def __len__(self):
        return len(self.x)

    def subset(self, split: str) -> "Dataset":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return Dataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx], [split] * len(idx))


def render_latent(spec: SceneSpec, blobs, frames: int | None = None) -> np.ndarray:
    """Latent intensity (frames, H, W) in float64."""
    frames = spec.frames if frames is None else frames
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    out = np.zeros((frames, spec.height, spec.width))
    for b in blobs:
        c, s = math.cos(b.angle), math.sin(b.angle)
        for t in range(frames):
            x0, y0 = b.position(t)
            dx, dy = xx - x0, yy - y0
            u = (c * dx + s * dy) / b.radii[0]
            v = (-s * dx + c * dy) / b.radii[1]
            out[t] += b.intensity * np.exp(-0.5 * (u * u + v * v))
    return out


def render_bands(spec: SceneSpec, latent: np.ndarray) -> np.ndarray:
    """(11, t_in, H, W) bands from the first ``t_in`` latent frames."""
    frames = latent[:spec.t_in]
    bands = np.empty((N_BANDS,) + frames.shape)
    for k in range(N_BANDS):
        sigma = spec.band_blur[k]
        base = gaussian_filter(frames, (0, sigma, sigma), mode="nearest") if sigma > 0 else frames
        bands[k] = spec.band_gains[k] * base + spec.band_offsets[k]
    return bands


def render_sample(spec: SceneSpec, blobs) -> tuple[np.ndarray, np.ndarray]:
    for b in blobs:
        spec.check_blob(b)
    latent = render_latent(spec, blobs)
    x = render_bands(spec, latent)[None].astype(np.float32)
    rain = (latent[spec.t_in:] >= spec.rain_threshold).astype(np.float32)
    y = crop_center_spatial(rain[None, None], spec.crop_factor)
    return x, y


def random_blobs(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 1000) -> list[Blob]:
    """Blobs whose path passes near the target window at a random frame."""
    lo, hi = spec.blob_count
    count = int(rng.integers(lo, hi + 1))
    cx, cy = (spec.width - 1) / 2, (spec.height - 1) / 2
    blobs = []
    for _ in range(count):
        for _ in range(max_tries):
            speed = rng.uniform(spec.speed_min, spec.speed_max)
            heading = rng.uniform(0, 2 * math.pi)
            v = (speed * math.cos(heading), speed * math.sin(heading))
            tc = rng.uniform(spec.t_in, spec.frames - 1)
            px = cx + rng.uniform(-spec.crossing_jitter, spec.crossing_jitter)
            py = cy + rng.uniform(-spec.crossing_jitter, spec.crossing_jitter)
            minor = rng.uniform(*spec.radius_range)
            major = min(minor * rng.uniform(*spec.aspect_range), spec.major_max)
            blob = Blob((px - tc * v[0], py - tc * v[1]), v, (major, minor),
                        float(rng.uniform(*spec.intensity_range)), float(rng.uniform(0, math.pi)))
            try:
                spec.check_blob(blob)
            except ValueError:
                continue
            blobs.append(blob)
            break
        else:
            raise RuntimeError("could not place a blob inside the frame; lower speed_max")
    return blobs


def generate(spec: SceneSpec, seed: int, count: int, splits=None, start_id: int = 0) -> Dataset:
    """``count`` samples; sample ``i`` is drawn from seed ``seed ^ i``.

    ``splits`` optionally tags each sample (defaults to all ``"train"``).
    """
    if count < 1:
        raise ValueError("count must be positive")
    xs, ys, ids = [], [], []
    for i in range(start_id, start_id + count):
        if spec.blobs is not None:
            blobs = list(spec.blobs)
        else:
            blobs = random_blobs(spec, np.random.default_rng(seed ^ i))
        x, y = render_sample(spec, blobs)
        xs.append(x)
        ys.append(y)
        ids.append(f"s{i:06d}")
    splits = list(splits) if splits is not None else ["train"] * count
    if len(splits) != count:
        raise ValueError("splits must tag every sample")
    return Dataset(np.concatenate(xs), np.concatenate(ys), ids, splits)


def generate_splits(spec: SceneSpec, seed: int, counts: dict) -> Dataset:
    """Consecutive id ranges per split, e.g. ``{"train": 500, "val": 100}``."""
    parts, start = [], 0
    for split in SPLITS:
        n = counts.get(split, 0)
        if n:
            parts.append(generate(spec, seed, n, [split] * n, start))
            start += n
    return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                   sum((p.ids for p in parts), []), sum((p.splits for p in parts), []))


def motion_scenes(count: int, seed: int, spec: SceneSpec | None = None) -> list[list[Blob]]:
    """Single thin tilted bands moving at (1, 0) px/frame across the target window.

    A wide convex blob would cover the whole window mid-horizon and stall the
    covered-area centroid. A band tilted about 25 degrees off horizontal keeps
    a partial edge inside the window at every lead time, so the ground-truth
    centroid strictly increases in W.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    cx, cy = (spec.width - 1) / 2, (spec.height - 1) / 2
    tm = spec.t_in + (spec.t_out - 1) / 2  # the band crosses the window center mid-horizon
    scenes = []
    for _ in range(count):
        angle = rng.uniform(0.38, 0.48) * rng.choice((-1, 1))
        center = (cx - tm + rng.uniform(-1, 1), cy + rng.uniform(-1, 1))
        radii = (rng.uniform(25.0, 35.0), rng.uniform(2.6, 3.2))
        scenes.append([Blob(center, (1.0, 0.0), radii, 1.5, float(angle))])
    return scenes


def persistence_baseline(x: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Last observed rain mask repeated over every lead time.

    Reads band 0, the unblurred latent field (gain 1, offset 0).
    """
    latent = (x[:, 0, spec.t_in - 1] - spec.band_offsets[0]) / spec.band_gains[0]
    rain = (latent >= spec.rain_threshold).astype(np.float32)[:, None, None]
    rain = crop_center_spatial(rain, spec.crop_factor)
    return np.repeat(rain, spec.t_out, axis=2)


def write_dataset(path, data: Dataset) -> None:
    """Write ``index.txt`` plus one STSR file per input and target."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sid in enumerate(data.ids):
        xf, yf = f"{sid}_x.stsr", f"{sid}_y.stsr"
        write_tensor(root / xf, data.x[i:i + 1])
        write_tensor(root / yf, data.y[i:i + 1])
        lines.append(f"{sid} {data.splits[i]} {xf} {yf}")
    (root / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path, split: str | None = None) -> Dataset:
    root = Path(path)
    index = root / "index.txt"
    if not index.exists():
        raise FileNotFoundError(f"no index.txt in {root}")
    xs, ys, ids, splits = [], [], [], []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CorruptFileError(f"index line {lineno}: expected '<id> <split> <x-file> <y-file>'")
        sid, sp, xf, yf = parts
        if sp not in SPLITS:
            raise CorruptFileError(f"index line {lineno}: unknown split {sp!r}")
        if split is not None and sp != split:
            continue
        for f in (xf, yf):
            if not (root / f).exists():
                raise CorruptFileError(f"sample {sid}: missing blob {f}")
        try:
            xs.append(read_tensor(root / xf))
            ys.append(read_tensor(root / yf))
        except CorruptFileError as exc:
            raise CorruptFileError(f"sample {sid}: {exc}") from None
        ids.append(sid)
        splits.append(sp)
    if not ids:
        raise CorruptFileError(f"{index} lists no samples" + (f" for split {split!r}" if split else ""))
    shapes = {a.shape[1:] for a in xs}, {a.shape[1:] for a in ys}
    if len(shapes[0]) != 1 or len(shapes[1]) != 1:
        raise CorruptFileError("samples in the index have inconsistent shapes")
    return Dataset(np.concatenate(xs), np.concatenate(ys), ids, splits)


def with_blobs(spec: SceneSpec, blobs) -> SceneSpec:
    return replace(spec, blobs=tuple(blobs))
