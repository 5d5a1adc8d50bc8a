"""Global color calibration: YUV mean/std matching blended with the input."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .colorlab import ColorError, ColorSpace, ImageBuffer, srgb_to_yuv, yuv_to_srgb

SIGMA_EPS = 1e-8
DEFAULT_ALPHA = 0.8


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def _yuv_array(img: ImageBuffer) -> np.ndarray:
    if img.empty:
        raise ColorError("calibration needs a non-empty image")
    if img.space is ColorSpace.YUV:
        return img.data
    if img.space is ColorSpace.SRGB:
        return srgb_to_yuv(img.data)
    raise ColorError(f"calibration expects srgb or yuv, got {img.space.value}")


def channel_stats(img: ImageBuffer) -> ChannelStats:
    """Per-channel population mean and standard deviation."""
    if img.empty:
        raise ColorError("channel_stats of an empty image")
    flat = img.data.reshape(-1, img.channels)
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    return ChannelStats(mean, std)


def match_statistics(src: np.ndarray, src_stats: ChannelStats, ref_stats: ChannelStats) -> np.ndarray:
    """``(src - mu_src) / sigma_src * sigma_ref + mu_ref`` per channel.

    Channels whose source deviation is below ``SIGMA_EPS`` are only shifted.
    """
    flat_sigma = src_stats.std < SIGMA_EPS
    ratio = np.where(flat_sigma, 1.0, ref_stats.std / np.where(flat_sigma, 1.0, src_stats.std))
    return (src - src_stats.mean) * ratio + ref_stats.mean


def calibrated_rgb(I: ImageBuffer, R: ImageBuffer, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Unclamped sRGB result of calibrating ``I`` towards ``R``.

    The blend is carried out in RGB. YUV is an affine image of RGB so this is
    the same blend as in YUV, and ``alpha = 0`` returns ``I`` bit for bit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ColorError(f"alpha must lie in [0, 1], got {alpha}")
    if I.space is not ColorSpace.SRGB or R.space is not ColorSpace.SRGB:
        raise ColorError("global_color_calibration expects srgb images")
    i_yuv = _yuv_array(I)
    r_yuv = _yuv_array(R)
    i_stats = channel_stats(ImageBuffer(i_yuv, ColorSpace.YUV))
    r_stats = channel_stats(ImageBuffer(r_yuv, ColorSpace.YUV))
    matched = yuv_to_srgb(match_statistics(i_yuv, i_stats, r_stats))
    return alpha * matched + (1.0 - alpha) * I.data


def global_color_calibration(I: ImageBuffer, R: ImageBuffer, alpha: float = DEFAULT_ALPHA) -> ImageBuffer:
    return ImageBuffer(np.clip(calibrated_rgb(I, R, alpha), 0.0, 1.0), ColorSpace.SRGB)
