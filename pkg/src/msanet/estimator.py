"""scikit-learn style wrapper around model construction, training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import SyntheticDataset
from .metrics import denoise_array, psnr
from .model import ModelConfig, build
from .train import TrainSchedule, fit


def check_images(X, channels: int | None = None) -> list[np.ndarray]:
    """Normalize image input to a list of (1, C, H, W) float32 arrays.

    Accepts one array of shape (H, W), (C, H, W) or (N, C, H, W), or a
    sequence of per-image arrays of shape (H, W) or (C, H, W) (sizes may
    differ). Values must be finite.
    """
    if isinstance(X, np.ndarray) or np.isscalar(X):
        arr = np.asarray(X)
        if arr.ndim == 2:
            items = [arr[None]]
        elif arr.ndim == 3:
            items = [arr]
        elif arr.ndim == 4:
            items = list(arr)
        else:
            raise ValueError(f"expected a 2-D, 3-D or 4-D image array, got shape {arr.shape}")
    else:
        items = []
        for im in X:
            im = np.asarray(im)
            if im.ndim == 2:
                im = im[None]
            elif im.ndim == 4 and im.shape[0] == 1:
                im = im[0]
            if im.ndim != 3:
                raise ValueError(f"expected (H, W) or (C, H, W) images, got shape {im.shape}")
            items.append(im)
    if not items:
        raise ValueError("no images given")
    out = []
    for im in items:
        if not np.issubdtype(im.dtype, np.number):
            raise TypeError(f"images must be numeric, got {im.dtype}")
        im = im.astype(np.float32)
        if not np.all(np.isfinite(im)):
            raise ValueError("images contain NaN or infinite values")
        if channels is not None and im.shape[0] != channels:
            raise ValueError(f"expected {channels}-channel images, got {im.shape[0]}")
        out.append(im[None])
    if len({im.shape[1] for im in out}) > 1:
        raise ValueError("images have differing channel counts")
    return out


class MSANetDenoiser(TransformerMixin, BaseEstimator):
    """Learns an AWGN denoiser from clean images.

    ``fit`` synthesizes noisy/clean training pairs at ``sigma`` (8-bit
    scale) from clean images; ``transform``/``predict`` denoise noisy
    images of any size and return arrays shaped like the input.
    """

    def __init__(self, sigma=25.0, base_channels=32, subnet_depths=(6, 5, 4, 2),
                 dilations=(1, 2, 3, 4), variant="full", epochs=30, steps_per_epoch=20,
                 lr=1e-4, loss_p=2, batch=8, patch=64, seed=0):
        self.sigma = sigma
        self.base_channels = base_channels
        self.subnet_depths = subnet_depths
        self.dilations = dilations
        self.variant = variant
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.lr = lr
        self.loss_p = loss_p
        self.batch = batch
        self.patch = patch
        self.seed = seed

    def _config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            in_channels=channels,
            base_channels=self.base_channels,
            subnet_depths=list(self.subnet_depths),
            dilations=list(self.dilations),
            variant=self.variant,
        ).validate()

    def fit(self, X, y=None):
        images = check_images(X)
        schedule = TrainSchedule(
            epochs=self.epochs, steps_per_epoch=self.steps_per_epoch, lr0=self.lr,
            loss_p=self.loss_p, batch=self.batch, patch=self.patch, seed=self.seed,
        ).validate()
        self.model_ = build(self._config(images[0].shape[1]), seed=self.seed)
        dataset = SyntheticDataset(images, self.sigma, self.seed)
        self.report_ = fit(self.model_, dataset, schedule)
        self.n_channels_ = images[0].shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        shape = np.shape(X) if isinstance(X, np.ndarray) else None
        images = check_images(X, channels=self.n_channels_)
        out = [denoise_array(self.model_, im)[0] for im in images]
        if shape is None:
            return out
        return np.stack(out).reshape(shape)

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean PSNR (dB) of denoised ``X`` against clean ``y``, outputs clamped to [0, 1]."""
        pred = check_images(self.transform(X))
        clean = check_images(y, channels=self.n_channels_)
        if len(pred) != len(clean):
            raise ValueError(f"{len(pred)} noisy images but {len(clean)} clean targets")
        return float(np.mean([psnr(np.clip(p, 0.0, 1.0), c) for p, c in zip(pred, clean)]))
