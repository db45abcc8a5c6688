"""Image-quality metrics: PSNR and single-scale SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import InvalidParameterError

PSNR_CAP = 99.0  # reported for identical images (MSE == 0)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse_to_psnr(mse: float) -> float:
    """Mean squared error to dB, unit peak signal; capped at PSNR_CAP."""
    if mse < 0.0:
        raise InvalidParameterError(f"mse must be nonnegative, got {mse}")
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return mse_to_psnr(float(np.mean((a - b) ** 2)))


def _gaussian_window(size, sigma):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image.mean(axis=2)
    return image


def ssim(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window, dynamic range 1.

    Color inputs are converted to grayscale by channel mean; the statistic
    is averaged over valid (fully inside) window positions.
    """
    a = _to_gray(image_a)
    b = _to_gray(image_b)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidParameterError(
            f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def f(x):
        return convolve2d(x, win, mode="valid")

    mu_a = f(a)
    mu_b = f(b)
    var_a = f(a * a) - mu_a ** 2
    var_b = f(b * b) - mu_b ** 2
    cov = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image and aggregate quality metrics for one evaluation run."""

    psnr_per_image: list
    ssim_per_image: list
    config_hash: str = ""
    wall_seconds: float = 0.0
    lpips_per_image: list | None = None  # reserved; not computed here

    @property
    def n_views(self) -> int:
        return len(self.psnr_per_image)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_per_image))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_per_image))

    def to_dict(self) -> dict:
        return {
            "n_views": self.n_views,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "psnr_per_image": [float(x) for x in self.psnr_per_image],
            "ssim_per_image": [float(x) for x in self.ssim_per_image],
            "lpips_per_image": self.lpips_per_image,
            "config_hash": self.config_hash,
            "wall_seconds": self.wall_seconds,
        }


def evaluate_images(rendered: list, targets: list, config_hash="",
                    wall_seconds=0.0) -> MetricReport:
    if len(rendered) != len(targets) or not rendered:
        raise InvalidParameterError("need equally many rendered and target images")
    return MetricReport(
        psnr_per_image=[psnr(r, t) for r, t in zip(rendered, targets)],
        ssim_per_image=[ssim(r, t) for r, t in zip(rendered, targets)],
        config_hash=config_hash,
        wall_seconds=wall_seconds,
    )
