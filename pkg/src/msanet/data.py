"""Image I/O, synthetic AWGN pairs and the patch augmentation pipeline."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageSample:
    clean: np.ndarray  # (1, C, H, W) float32 in [0, 1]
    noisy: np.ndarray
    sigma: float
    seed: int
    source_path: str = ""


@dataclass
class PatchBatch:
    clean: np.ndarray  # (B, C, P, P)
    noisy: np.ndarray
    # per patch: (image index, crop y, crop x, flip, quarter turns)
    augmentations: list[tuple[int, int, int, bool, int]] = field(default_factory=list)


def load_image(path, grayscale: bool = False) -> np.ndarray:
    """Read an 8-bit PNG/PGM/PPM into a (1, C, H, W) float32 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"unsupported image format: {path.suffix or path.name}")
    with Image.open(path) as im:
        if im.format not in ("PNG", "PPM"):
            raise ImageFormatError(f"{path}: unsupported format {im.format}")
        if im.mode.startswith(("I", "F")):
            raise ImageFormatError(f"{path}: only 8-bit images are supported")
        if im.mode in ("L", "1", "P", "LA"):
            im = im.convert("L") if im.mode != "P" else im.convert("RGB")
        elif im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: only 8-bit images are supported")
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    out = (arr.astype(np.float32) / np.float32(255.0))[None]
    if grayscale and out.shape[1] == 3:
        out = to_grayscale(out)
    return out


def quantize(t) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return np.floor(np.clip(data.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(t, path) -> None:
    """Write a (1, C, H, W) or (C, H, W) tensor as an 8-bit image (PNG or PGM/PPM by suffix)."""
    q = quantize(t)
    if q.ndim == 4:
        if q.shape[0] != 1:
            raise ValueError(f"save_image expects a single image, got batch of {q.shape[0]}")
        q = q[0]
    if q.shape[0] == 1:
        im = Image.fromarray(q[0], mode="L")
    elif q.shape[0] == 3:
        im = Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)), mode="RGB")
    else:
        raise ValueError(f"cannot save {q.shape[0]}-channel image")
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"unsupported output format: {suffix}")
    im.save(path, format="PNG" if suffix == ".png" else "PPM")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a (N, 3, H, W) array."""
    y = np.tensordot(LUMA_WEIGHTS, img.astype(np.float64), axes=([0], [1]))
    return y[:, None].astype(np.float32)


def add_awgn(clean, sigma: float, seed: int) -> np.ndarray:
    """Add iid N(0, (sigma/255)^2) noise; the result is not clamped."""
    data = clean.data if isinstance(clean, Tensor) else np.asarray(clean, dtype=np.float32)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return data.copy()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(data.shape) * (sigma / 255.0)
    return (data + noise.astype(np.float32)).astype(np.float32)


def file_seed(seed: int, name: str) -> int:
    """Per-file seed derived from the run seed and the file name only."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*parts: int) -> int:
    """Stable seed from integer components (e.g. run seed, epoch, step)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_manifest(path) -> list[Path]:
    """Plain-text manifest: one image path per line, relative to the manifest."""
    base = Path(path).parent
    lines = Path(path).read_text().splitlines()
    return [base / ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]


class SyntheticDataset:
    """Clean images plus (sigma, seed) define noisy/clean pairs generated on the fly.

    ``pairs(epoch)`` draws a fresh noise realization per image and epoch;
    ``pairs()`` with no epoch gives the fixed evaluation realization whose
    per-image seed depends only on the file name.
    """

    def __init__(self, images: Sequence[np.ndarray], sigma: float, seed: int = 0,
                 names: Sequence[str] | None = None, clamp_noisy: bool = False):
        if not len(images):
            raise ValueError("dataset is empty")
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.sigma = float(sigma)
        self.seed = int(seed)
        self.names = list(names) if names is not None else [f"image{i:04d}" for i in range(len(self.images))]
        self.clamp_noisy = clamp_noisy

    @classmethod
    def from_directory(cls, directory, sigma: float, seed: int = 0, grayscale: bool = False, **kw):
        paths = list_images(directory)
        if not paths:
            raise ValueError(f"no images in {directory}")
        return cls([load_image(p, grayscale) for p in paths], sigma, seed, [str(p) for p in paths], **kw)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images[0].shape[1]

    def pairs(self, epoch: int | None = None) -> list[ImageSample]:
        out = []
        for i, (img, name) in enumerate(zip(self.images, self.names)):
            if epoch is None:
                s = file_seed(self.seed, os.path.basename(name))
            else:
                s = derive_seed(self.seed, epoch, i)
            noisy = add_awgn(img, self.sigma, s)
            if self.clamp_noisy:
                noisy = np.clip(noisy, 0.0, 1.0)
            out.append(ImageSample(img, noisy, self.sigma, s, name))
        return out


def augment(patch: np.ndarray, flip: bool, quarter_turns: int) -> np.ndarray:
    """Horizontal flip then counter-clockwise rotation by 90-degree steps on (..., H, W)."""
    if flip:
        patch = patch[..., ::-1]
    return np.rot90(patch, quarter_turns, axes=(-2, -1))


def sample_patch_batch(pairs: Sequence[ImageSample], patch: int, batch: int, seed: int) -> PatchBatch:
    """Random crops with identical flip/rotation applied to both members of each pair."""
    for s in pairs:
        h, w = s.clean.shape[2:]
        if h < patch or w < patch:
            raise ValueError(f"image {s.source_path or '?'} ({h}x{w}) smaller than patch {patch}")
    rng = np.random.default_rng(seed)
    c = pairs[0].clean.shape[1]
    clean = np.empty((batch, c, patch, patch), dtype=np.float32)
    noisy = np.empty_like(clean)
    record = []
    for b in range(batch):
        i = int(rng.integers(len(pairs)))
        s = pairs[i]
        h, w = s.clean.shape[2:]
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        flip = bool(rng.integers(2))
        rot = int(rng.integers(4))
        clean[b] = augment(s.clean[0, :, y:y + patch, x:x + patch], flip, rot)
        noisy[b] = augment(s.noisy[0, :, y:y + patch, x:x + patch], flip, rot)
        record.append((i, y, x, flip, rot))
    return PatchBatch(clean, noisy, record)
