"""Gaussian smoothing of 2D images.

The kernel is truncated at ``ceil(3 * sigma)`` and normalised over its
discrete support. Edges use symmetric reflection (``-1 -> 0``, ``W -> W-1``),
so constant images are reproduced exactly. Convolution runs as two 1D passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import IvoId
from .fits import FitsImage, HeaderCard

SIGMA_MIN = 1.0
SIGMA_MAX = 10.0
SIGMA_MESSAGE = "Sigma must be between 1 and 10"


class SigmaOutOfRange(ValueError):
    def __init__(self, sigma):
        super().__init__(f"{SIGMA_MESSAGE} (got {sigma!r})")
        self.sigma = sigma


def check_sigma(sigma) -> float:
    try:
        value = float(sigma)
    except (TypeError, ValueError):
        raise SigmaOutOfRange(sigma) from None
    # NaN fails both comparisons
    if not (SIGMA_MIN <= value <= SIGMA_MAX):
        raise SigmaOutOfRange(sigma)
    return value


@dataclass(frozen=True)
class GaussConvParams:
    ivo: IvoId
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "sigma", check_sigma(self.sigma))


@dataclass(frozen=True, eq=False)
class Kernel:
    sigma: float
    radius: int
    weights: np.ndarray   # (2r+1, 2r+1), sums to 1
    profile: np.ndarray   # (2r+1,), 1D factor with outer(profile, profile) ~= weights

    @property
    def size(self) -> int:
        return 2 * self.radius + 1


def build_kernel(sigma: float) -> Kernel:
    sigma = check_sigma(sigma)
    radius = math.ceil(3 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    sq = offsets[:, None] ** 2 + offsets[None, :] ** 2
    weights = np.exp(-sq / (2 * sigma * sigma))
    weights /= weights.sum()
    profile = np.exp(-(offsets ** 2) / (2 * sigma * sigma))
    profile /= profile.sum()
    weights.setflags(write=False)
    profile.setflags(write=False)
    return Kernel(sigma, radius, weights, profile)


def _smooth_rows(padded: np.ndarray, profile: np.ndarray, n: int) -> np.ndarray:
    # 1D pass along the last axis; padded has n + 2r columns
    out = np.zeros((padded.shape[0], n))
    for k, w in enumerate(profile):
        out += w * padded[:, k:k + n]
    return out


def convolve_pixels(pixels: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Separable convolution of a 2D array with reflected borders."""
    pixels = np.asarray(pixels, dtype=np.float64)
    height, width = pixels.shape
    padded = np.pad(pixels, kernel.radius, mode="symmetric")
    rows = _smooth_rows(padded, kernel.profile, width)
    return _smooth_rows(rows.T, kernel.profile, height).T.copy()


def history_card(sigma: float) -> HeaderCard:
    return HeaderCard("HISTORY", None, f"gaussconv sigma={sigma!r}")


def convolve2d(image: FitsImage, kernel: Kernel) -> FitsImage:
    image.validate()
    smoothed = convolve_pixels(image.pixels, kernel)
    return FitsImage(image.cards, smoothed).with_card(history_card(kernel.sigma))


def gaussconv(image: FitsImage, params: GaussConvParams) -> FitsImage:
    return convolve2d(image, build_kernel(params.sigma))
