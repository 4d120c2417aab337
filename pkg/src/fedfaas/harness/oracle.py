"""Reference computations the harness checks service output against.

These deliberately avoid the engine's code path: the kernel comes straight
from the formula, edges use explicit modular reflection, and the convolution
is a direct 2D double sum.
"""

from __future__ import annotations

import math

import numpy as np


def reflect_index(i: int, n: int) -> int:
    """Symmetric reflection: -1 -> 0, n -> n-1, repeated for deeper overhang."""
    period = 2 * n
    i %= period
    return i if i < n else period - 1 - i


def direct_kernel(sigma: float) -> np.ndarray:
    r = math.ceil(3 * sigma)
    k = np.empty((2 * r + 1, 2 * r + 1))
    for i in range(-r, r + 1):
        for j in range(-r, r + 1):
            k[i + r, j + r] = math.exp(-(i * i + j * j) / (2 * sigma * sigma))
    return k / k.sum()


def direct_convolve_loops(pixels, sigma: float) -> np.ndarray:
    """Pure-Python quadruple loop; only for tiny images."""
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape
    k = direct_kernel(sigma)
    r = k.shape[0] // 2
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(-r, r + 1):
                for j in range(-r, r + 1):
                    acc += k[i + r, j + r] * img[reflect_index(y + i, h), reflect_index(x + j, w)]
            out[y, x] = acc
    return out


def direct_convolve(pixels, sigma: float) -> np.ndarray:
    """Direct 2D sum over every kernel tap, vectorised across output pixels."""
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape
    k = direct_kernel(sigma)
    r = k.shape[0] // 2
    rows = {i: np.array([reflect_index(y + i, h) for y in range(h)]) for i in range(-r, r + 1)}
    cols = {j: np.array([reflect_index(x + j, w) for x in range(w)]) for j in range(-r, r + 1)}
    out = np.zeros((h, w))
    for i in range(-r, r + 1):
        band = img[rows[i], :]
        for j in range(-r, r + 1):
            out += k[i + r, j + r] * band[:, cols[j]]
    return out
