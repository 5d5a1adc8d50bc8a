"""PNG reading and writing for image buffers and edge maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .colorlab import ColorSpace, ImageBuffer
from .edges import EdgeMap


class ImageIOError(OSError):
    pass


def _open(path: str | Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError:
        raise ImageIOError(f"no such image: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from None


def read_image(path: str | Path) -> ImageBuffer:
    """8-bit PNG (any mode) as an sRGB buffer in [0, 1]."""
    img = _open(path)
    if img.mode not in ("RGB", "L"):
        img = img.convert("RGBA").convert("RGB") if "A" in img.mode or img.mode == "P" else img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return ImageBuffer(arr, ColorSpace.SRGB)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(img: ImageBuffer, path: str | Path) -> None:
    """Write an sRGB buffer as 8-bit RGB, or a greyscale buffer as 8-bit L."""
    if img.space is ColorSpace.GREY:
        Image.fromarray(_to_u8(img.data[:, :, 0])).save(path, format="PNG")
    elif img.space is ColorSpace.SRGB:
        Image.fromarray(_to_u8(img.data)).save(path, format="PNG")
    else:
        raise ImageIOError(f"only srgb or grey buffers can be written, got {img.space.value}")


def write_edges(edges: EdgeMap, path: str | Path) -> None:
    """1-bit PNG, white edges on black."""
    grey = (edges.data.astype(np.uint8) * 255).astype(np.uint8)
    Image.fromarray(grey).convert("1", dither=Image.Dither.NONE).save(path, format="PNG")


def read_edges(path: str | Path) -> EdgeMap:
    img = _open(path).convert("L")
    return EdgeMap((np.asarray(img) > 127).astype(np.uint8))
