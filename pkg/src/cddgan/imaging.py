"""Haze synthesis, the dark-channel operator and image I/O.

Images are ``float64`` arrays of shape ``(H, W, 3)`` with values in [0, 1].
Networks work on ``(B, 3, H, W)`` tensors in [-1, 1]; :func:`to_internal`
and :func:`from_internal` convert between the two conventions.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image as PILImage, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate an ``(H, W, 3)`` array in [0, 1] and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(f"{name} values must lie in [0, 1]")
    return arr


@dataclass
class HazeScene:
    clean: np.ndarray
    transmission: np.ndarray
    airlight: np.ndarray

    def __post_init__(self):
        self.clean = check_image(self.clean, "clean")
        self.transmission = np.asarray(self.transmission, dtype=np.float64)
        self.airlight = np.broadcast_to(
            np.asarray(self.airlight, dtype=np.float64), (3,)).copy()
        if self.transmission.shape != self.clean.shape[:2]:
            raise DataError(
                f"transmission shape {self.transmission.shape} does not match "
                f"image shape {self.clean.shape[:2]}")
        if self.transmission.min() < 0.0 or self.transmission.max() > 1.0:
            raise DataError("transmission values must lie in [0, 1]")
        if self.airlight.min() < 0.0 or self.airlight.max() > 1.0:
            raise DataError("airlight components must lie in [0, 1]")


def synthesize_haze(scene: HazeScene) -> np.ndarray:
    """Render ``I = J * t + A * (1 - t)`` per pixel and channel."""
    t = scene.transmission[..., None]
    out = scene.clean * t + scene.airlight[None, None, :] * (1.0 - t)
    # convex combination of values in [0,1]; clip only guards rounding
    return np.clip(out, 0.0, 1.0)


def transmission_from_depth(depth, beta: float) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if beta < 0 or not np.isfinite(beta):
        raise DataError(f"beta must be a finite nonnegative number, got {beta}")
    if depth.size and (not np.all(np.isfinite(depth)) or depth.min() < 0):
        raise DataError("depth must be finite and nonnegative")
    return np.exp(-beta * depth)


def dark_channel(img, patch_radius: int = 7) -> np.ndarray:
    """Per-pixel minimum over color channels and a ``(2r+1)^2`` window.

    The window is clamped to the image bounds. Nearest-edge padding gives the
    same minima because padded values are copies of in-bounds pixels.
    """
    img = check_image(img)
    if patch_radius < 0:
        raise DataError("patch_radius must be nonnegative")
    channel_min = img.min(axis=2)
    if patch_radius == 0:
        return channel_min
    return ndimage.minimum_filter(channel_min, size=2 * patch_radius + 1, mode="nearest")


# ---------------------------------------------------------------------------
# tensor conversion


def to_internal(img, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` in [0,1] -> ``(1, 3, H, W)`` tensor in [-1,1]."""
    arr = check_image(img)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return (t.to(dtype) * 2.0 - 1.0).unsqueeze(0)


def from_internal(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_internal` for a single image (batch of one or CHW)."""
    x = x.detach()
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ValueError("from_internal expects a single image")
        x = x[0]
    arr = ((x.double().cpu().numpy() + 1.0) / 2.0).transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# I/O


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"unsupported or corrupt image file: {path}") from exc
    return arr / 255.0


def save_image(img, path) -> None:
    """Write an 8-bit PNG (the format is taken from the suffix)."""
    arr = check_image(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.round(arr * 255.0).astype(np.uint8)
    PILImage.fromarray(q, mode="RGB").save(path)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# unpaired sampling


@dataclass
class UnpairedDataset:
    """Two independent pools of images; index ``i`` on one side is unrelated to
    index ``i`` on the other.

    Entries are file paths or in-memory arrays. Loaded files are cached.
    """

    hazy: Sequence
    clean: Sequence
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.hazy) == 0 or len(self.clean) == 0:
            raise DataError("unpaired dataset needs at least one hazy and one clean image")

    @classmethod
    def from_dirs(cls, hazy_dir, clean_dir) -> "UnpairedDataset":
        return cls(list_images(hazy_dir), list_images(clean_dir))

    def __len__(self):
        return max(len(self.hazy), len(self.clean))

    def get(self, side: str, index: int) -> np.ndarray:
        item = (self.hazy if side == "hazy" else self.clean)[index]
        if isinstance(item, (str, os.PathLike)):
            key = (side, index)
            if key not in self._cache:
                self._cache[key] = load_image(item)
            return self._cache[key]
        return check_image(item)


def random_crop(img: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if crop > min(h, w) or crop < 1:
        raise DataError(f"crop {crop} does not fit image of size {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return img[top:top + crop, left:left + crop]


def sample_unpaired_batch(ds: UnpairedDataset, crop: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw one hazy and one clean image independently, each randomly cropped.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hi = int(rng.integers(len(ds.hazy)))
    ci = int(rng.integers(len(ds.clean)))
    hazy = random_crop(ds.get("hazy", hi), crop, rng)
    clean = random_crop(ds.get("clean", ci), crop, rng)
    return hazy, clean


# ---------------------------------------------------------------------------
# synthetic scenes


def smooth_field(shape, rng: np.random.Generator, scale: float = 8.0) -> np.ndarray:
    """Low-frequency noise in [0, 1]: Gaussian-blurred white noise, rescaled."""
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=scale, mode="wrap")
    f -= f.min()
    span = f.max()
    return f / span if span > 0 else np.zeros(shape)


def random_clean_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """A synthetic haze-free scene: smooth colored background plus saturated
    shapes and fine texture, so its dark channel is mostly near zero."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    img = np.empty((h, w, 3))
    for c in range(3):
        img[..., c] = 0.15 + 0.6 * smooth_field((h, w), rng, scale=size / 6)
    # darken one channel per region, like colored natural surfaces
    img *= (0.35 + 0.65 * rng.random(3))[None, None, :]
    for _ in range(int(rng.integers(3, 8))):
        color = rng.random(3)
        color[rng.integers(3)] *= 0.1
        cy, cx = rng.random(2)
        r = 0.08 + 0.2 * rng.random()
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * (0.5 + rng.random()))
        img[mask] = color
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * rng.uniform(3, 9) + yy * rng.uniform(-4, 4)))
    img *= (0.85 + 0.15 * stripes)[..., None]
    img += 0.03 * rng.standard_normal((h, w, 1))
    return np.clip(img, 0.0, 1.0)


def random_depth(size: int, rng: np.random.Generator, lo: float = 0.1, hi: float = 1.0) -> np.ndarray:
    """Smooth random field plus a linear ramp, rescaled to ``[lo, hi]``."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    d = 0.6 * smooth_field((size, size), rng, scale=size / 5) + ramp
    d -= d.min()
    if d.max() > 0:
        d /= d.max()
    return lo + (hi - lo) * d


def random_scene(size: int, rng: np.random.Generator, clean=None) -> tuple[HazeScene, float]:
    """Sample a scene with airlight ~ U[0.7, 1.0] per channel and
    beta ~ U[0.6, 1.8]. Returns the scene and its beta."""
    if clean is None:
        clean = random_clean_image(size, rng)
    airlight = rng.uniform(0.7, 1.0, size=3)
    beta = float(rng.uniform(0.6, 1.8))
    t = transmission_from_depth(random_depth(size, rng), beta)
    return HazeScene(clean, t, airlight), beta


def make_synthetic_set(out_dir, count: int, size: int, seed: int = 0) -> Path:
    """Write ``count`` hazy/clean pairs under ``out_dir/{hazy,clean}`` plus
    ``manifest.csv`` (filename, A_r, A_g, A_b, beta). Returns the manifest path."""
    if count < 1 or size < 1:
        raise DataError("count and size must be positive")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(count):
        scene, beta = random_scene(size, rng)
        name = f"{i:05d}.png"
        save_image(scene.clean, out_dir / "clean" / name)
        save_image(synthesize_haze(scene), out_dir / "hazy" / name)
        rows.append([name, *(f"{a:.6f}" for a in scene.airlight), f"{beta:.6f}"])
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "A_r", "A_g", "A_b", "beta"])
        writer.writerows(rows)
    return manifest
