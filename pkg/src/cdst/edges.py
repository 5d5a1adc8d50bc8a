"""Canny edge maps used as the structure-conditioning signal.

Blur and Sobel are evaluated on integers held in float64 (the image is
quantized to 20 bits and the Gaussian kernel to integer weights), so every
sum is exact. That makes the detector bit-for-bit equivariant under 90 degree
rotations and flips, which summation-order rounding would otherwise break.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .colorlab import ColorSpace, ImageBuffer, greyscale

DEFAULT_LOW = 0.1
DEFAULT_HIGH = 0.2
DEFAULT_SIGMA = 1.0

_IMAGE_BITS = 20
_KERNEL_BITS = 10
_TAN_22_5 = np.tan(np.pi / 8)


class EdgeParameterError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeMap:
    data: np.ndarray  # (H, W) uint8 in {0, 1}

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _integer_gaussian(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.round(np.exp(-(x**2) / (2.0 * sigma**2)) * 2**_KERNEL_BITS)
    return np.outer(g, g)


@functools.lru_cache(maxsize=32)
def _step_peak(blur_sigma: float) -> float:
    """Unnormalized magnitude peak of a blurred unit step (in image units)."""
    kernel = _integer_gaussian(blur_sigma)
    step = np.zeros((kernel.shape[0] * 3, kernel.shape[0] * 3))
    step[:, step.shape[1] // 2 :] = 1.0
    _, _, mag = _raw_gradients(step, kernel)
    return float(mag.max())


def _raw_gradients(grey: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = np.round(np.clip(grey, 0.0, 1.0) * 2**_IMAGE_BITS)
    blurred = ndimage.correlate(q, kernel, mode="reflect")
    p = np.pad(blurred, 1, mode="edge")
    # Sobel, columns increase to the right (x), rows increase downward (y).
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy, np.sqrt(gx * gx + gy * gy)


def gradient_field(grey: np.ndarray, blur_sigma: float = DEFAULT_SIGMA) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Blurred Sobel gradients ``(gx, gy, magnitude)``.

    The magnitude is normalized so that a blurred unit step peaks at exactly 1.
    """
    gx, gy, mag = _raw_gradients(grey, _integer_gaussian(blur_sigma))
    return gx, gy, mag / _step_peak(float(blur_sigma))


def non_maximum_suppression(gx: np.ndarray, gy: np.ndarray, mag: np.ndarray) -> np.ndarray:
    ax, ay = np.abs(gx), np.abs(gy)
    horizontal = ay <= _TAN_22_5 * ax  # gradient along x: compare left/right
    vertical = ax <= _TAN_22_5 * ay
    diag_main = ~horizontal & ~vertical & (gx * gy > 0)  # down-right / up-left
    diag_anti = ~horizontal & ~vertical & (gx * gy < 0)
    # Ties on both axes (ax == ay == 0) fall into both masks; such pixels have zero magnitude.
    p = np.pad(mag, 1, mode="constant")
    c = p[1:-1, 1:-1]
    left, right = p[1:-1, :-2], p[1:-1, 2:]
    up, down = p[:-2, 1:-1], p[2:, 1:-1]
    ul, dr = p[:-2, :-2], p[2:, 2:]
    ur, dl = p[:-2, 2:], p[2:, :-2]
    keep = np.zeros(mag.shape, dtype=bool)
    keep |= horizontal & (c >= left) & (c >= right)
    keep |= vertical & (c >= up) & (c >= down)
    keep |= diag_main & (c >= ul) & (c >= dr)
    keep |= diag_anti & (c >= ur) & (c >= dl)
    return np.where(keep, mag, 0.0)


def hysteresis(thin: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = thin > low
    strong = thin > high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros(thin.shape, dtype=np.uint8)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.uint8)


def canny(
    img: ImageBuffer,
    low: float = DEFAULT_LOW,
    high: float = DEFAULT_HIGH,
    blur_sigma: float = DEFAULT_SIGMA,
) -> EdgeMap:
    if not 0.0 < low < high:
        raise EdgeParameterError(f"need 0 < low < high, got low={low}, high={high}")
    if blur_sigma <= 0:
        raise EdgeParameterError(f"blur_sigma must be positive, got {blur_sigma}")
    if img.space is ColorSpace.SRGB:
        img = greyscale(img)
    elif img.space is not ColorSpace.GREY:
        raise EdgeParameterError(f"canny expects srgb or grey input, got {img.space.value}")
    gx, gy, mag = gradient_field(img.data[:, :, 0], blur_sigma)
    return EdgeMap(hysteresis(non_maximum_suppression(gx, gy, mag), low, high))
