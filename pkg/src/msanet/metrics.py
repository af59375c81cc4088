"""PSNR / SSIM and dataset evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SyntheticDataset
from .tensor import ShapeError, Tensor, no_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _arr(x) -> np.ndarray:
    return (x.data if isinstance(x, Tensor) else np.asarray(x)).astype(np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB over all channels and pixels; ``inf`` when equal."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr operands differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of the last two axes with 1-D kernel g."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM over the valid region of each (H, W) plane."""
    g = gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (std 1.5), mean of per-channel values."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2]}x{a.shape[-1]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    planes_a = a.reshape(-1, *a.shape[-2:])
    planes_b = b.reshape(-1, *b.shape[-2:])
    return float(np.mean([ssim_map(pa, pb, peak).mean() for pa, pb in zip(planes_a, planes_b)]))


@dataclass
class MetricReport:
    paths: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_csv(self) -> str:
        lines = ["image_path,psnr_db,ssim"]
        lines += [f"{p},{q:.6f},{s:.6f}" for p, q, s in zip(self.paths, self.psnr, self.ssim)]
        lines.append(f"MEAN,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"


def pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom/right of an NCHW array to the next multiple."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def denoise_array(model: Callable, noisy: np.ndarray, multiple: int | None = None) -> np.ndarray:
    """Run ``model`` on one (1, C, H, W) array of any size, padding and cropping as needed."""
    if multiple is None:
        multiple = getattr(getattr(model, "config", None), "size_multiple", 1)
    padded, (h, w) = pad_to_multiple(noisy, multiple)
    with no_grad():
        out = model(Tensor(padded))
    out = out.data if isinstance(out, Tensor) else np.asarray(out)
    return out[..., :h, :w]


def passthrough(x):
    """Identity denoiser; the noise-floor reference."""
    return x


def evaluate(model: Callable, dataset: SyntheticDataset, sigma: float | None = None,
             seed: int | None = None, clamp: bool = True) -> MetricReport:
    """Per-image PSNR/SSIM of ``model`` outputs against clean targets.

    Uses the dataset's fixed evaluation noise (deterministic per seed and
    file name); ``sigma``/``seed`` override the dataset's own. Outputs are
    clamped to [0, 1] before measuring.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if sigma is not None or seed is not None:
        dataset = SyntheticDataset(
            dataset.images,
            dataset.sigma if sigma is None else sigma,
            dataset.seed if seed is None else seed,
            dataset.names,
            clamp_noisy=dataset.clamp_noisy,
        )
    report = MetricReport()
    for sample in dataset.pairs():
        out = denoise_array(model, sample.noisy)
        if clamp:
            out = np.clip(out, 0.0, 1.0)
        report.paths.append(sample.source_path)
        report.psnr.append(psnr(out, sample.clean))
        report.ssim.append(ssim(out, sample.clean))
    return report
