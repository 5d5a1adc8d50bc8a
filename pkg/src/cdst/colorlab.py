"""Color spaces, greyscale, the quantized LAB palette histogram and its distance.

All images are :class:`ImageBuffer` values holding an ``(H, W, C)`` float64
array. sRGB and linear RGB live in [0, 1]; HSV uses hue in degrees
``[0, 360)`` with saturation and value in [0, 1]; LAB is CIE L*a*b* under
D65; YUV is BT.601 full range (Y in [0, 1], U in [-0.5, 0.5] scaled like
Cb, V like Cr).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ColorSpace(str, enum.Enum):
    SRGB = "srgb"
    LINEAR_RGB = "linear_rgb"
    HSV = "hsv"
    LAB = "lab"
    YUV = "yuv"
    GREY = "grey"

    @property
    def channels(self) -> int:
        return 1 if self is ColorSpace.GREY else 3


class ColorError(ValueError):
    """Raised for invalid images, palettes or histograms."""


class ConversionUnsupported(ColorError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    data: np.ndarray
    space: ColorSpace = ColorSpace.SRGB

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] != self.space.channels:
            raise ColorError(
                f"{self.space.value} image needs shape (H, W, {self.space.channels}), got {arr.shape}"
            )
        if self.space in (ColorSpace.SRGB, ColorSpace.LINEAR_RGB) and arr.size:
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ColorError(f"{self.space.value} values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def empty(self) -> bool:
        return self.data.shape[0] == 0 or self.data.shape[1] == 0


# BT.601 luma weights. They sum to exactly 1 in exact arithmetic, which lets the
# formulas below be written so that neutral pixels give exact results.
KR, KG, KB = 0.299, 0.587, 0.114

# sRGB primaries -> XYZ (D65).
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# Reference white is the image of RGB white so that (1, 1, 1) lands on L=100, a=b=0.
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def _luma(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    # b + KR(r-b) + KG(g-b) is KR r + KG g + KB b, but exact for neutral pixels.
    return b + KR * (r - b) + KG * (g - b)


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * np.power(np.maximum(c, 0.0), 1 / 2.4) - 0.055)


def linear_to_lab(lin: np.ndarray) -> np.ndarray:
    xyz = lin @ _RGB_TO_XYZ.T
    t = xyz / _WHITE
    f = np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    return linear_to_lab(srgb_to_linear(rgb))


def srgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h * 60.0, 0.0) % 360.0
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_srgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h = (hsv[..., 0] % 360.0) / 60.0
    s, v = hsv[..., 1], hsv[..., 2]
    c = v * s
    x = c * (1.0 - np.abs(h % 2.0 - 1.0))
    m = v - c
    z = np.zeros_like(c)
    sector = np.floor(h).astype(int) % 6
    choices_r = [c, x, z, z, x, c]
    choices_g = [x, c, c, x, z, z]
    choices_b = [z, z, x, c, c, x]
    r = np.choose(sector, choices_r) + m
    g = np.choose(sector, choices_g) + m
    b = np.choose(sector, choices_b) + m
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def srgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _luma(rgb)
    # Written on colour differences so that neutral pixels give U = V = 0 exactly.
    u = (KR * (b - r) + KG * (b - g)) / (2.0 * (1.0 - KB))
    v = (KG * (r - g) + KB * (r - b)) / (2.0 * (1.0 - KR))
    return np.stack([y, u, v], axis=-1)


def yuv_to_srgb(yuv: np.ndarray) -> np.ndarray:
    yuv = np.asarray(yuv, dtype=np.float64)
    y, u, v = yuv[..., 0], yuv[..., 1], yuv[..., 2]
    r = y + 2.0 * (1.0 - KR) * v
    b = y + 2.0 * (1.0 - KB) * u
    g = (y - KR * r - KB * b) / KG
    return np.stack([r, g, b], axis=-1)


_CONVERTERS = {
    (ColorSpace.SRGB, ColorSpace.HSV): srgb_to_hsv,
    (ColorSpace.HSV, ColorSpace.SRGB): hsv_to_srgb,
    (ColorSpace.SRGB, ColorSpace.LINEAR_RGB): srgb_to_linear,
    (ColorSpace.LINEAR_RGB, ColorSpace.SRGB): linear_to_srgb,
    (ColorSpace.SRGB, ColorSpace.LAB): srgb_to_lab,
    (ColorSpace.LINEAR_RGB, ColorSpace.LAB): linear_to_lab,
    (ColorSpace.SRGB, ColorSpace.YUV): srgb_to_yuv,
    (ColorSpace.YUV, ColorSpace.SRGB): yuv_to_srgb,
    (ColorSpace.SRGB, ColorSpace.GREY): lambda rgb: _luma(rgb)[..., None],
}


def convert(img: ImageBuffer, target: ColorSpace) -> ImageBuffer:
    target = ColorSpace(target)
    if img.space is target:
        return img
    fn = _CONVERTERS.get((img.space, target))
    if fn is None:
        raise ConversionUnsupported(f"cannot convert {img.space.value} -> {target.value}")
    out = fn(img.data)
    if target in (ColorSpace.SRGB, ColorSpace.LINEAR_RGB):
        # Inverse transforms can overshoot by an ulp or, for YUV, leave the gamut.
        out = np.clip(out, 0.0, 1.0)
    return ImageBuffer(out, target)


def greyscale(img: ImageBuffer) -> ImageBuffer:
    """BT.601 luma of an sRGB image as a single-channel GREY image."""
    if img.space is not ColorSpace.SRGB:
        raise ColorError(f"greyscale expects an srgb image, got {img.space.value}")
    return ImageBuffer(_luma(img.data)[..., None], ColorSpace.GREY)


def grey_to_srgb(img: ImageBuffer) -> ImageBuffer:
    if img.space is not ColorSpace.GREY:
        raise ColorError("grey_to_srgb expects a grey image")
    return ImageBuffer(np.repeat(np.clip(img.data, 0.0, 1.0), 3, axis=2), ColorSpace.SRGB)



def luma_preserving_recolor(img: ImageBuffer, degrees: float, chroma_scale: float = 1.0) -> ImageBuffer:
    """Rotate (and scale) the chroma of an sRGB image while keeping its luma bit for bit.

    Chroma is rotated in the UV plane and pulled towards grey where the result
    would leave the gamut. Blue, then green, then red are nudged until the luma
    of each pixel equals the original float exactly; a pixel that cannot be
    repaired keeps its original value.
    """
    if img.space is not ColorSpace.SRGB:
        raise ColorError(f"luma_preserving_recolor expects an srgb image, got {img.space.value}")
    rgb = img.data
    y = _luma(rgb)
    yuv = srgb_to_yuv(rgb)
    th = np.deg2rad(degrees)
    u = chroma_scale * (np.cos(th) * yuv[..., 1] - np.sin(th) * yuv[..., 2])
    v = chroma_scale * (np.sin(th) * yuv[..., 1] + np.cos(th) * yuv[..., 2])
    out = yuv_to_srgb(np.stack([y, u, v], axis=-1))
    # Largest s in [0, 1] keeping y + s (out - y) inside [0, 1] on every channel.
    d = out - y[..., None]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        room = np.where(d > 0, (1.0 - y[..., None]) / d, np.where(d < 0, -y[..., None] / d, np.inf))
    s = np.clip(np.min(room, axis=-1), 0.0, 1.0)
    out = np.clip(y[..., None] + s[..., None] * d, 0.0, 1.0)
    for ch, weight in ((2, KB), (1, KG), (0, KR)):
        for _ in range(6):
            err = _luma(out) - y
            if not np.any(err):
                break
            c = out[..., ch]
            # One exact step towards the target, then ulp steps for what rounding leaves.
            coarse = np.abs(err) > 4 * np.spacing(np.maximum(y, 1e-300))
            step = np.where(coarse, c - err / weight, np.nextafter(c, np.where(err > 0, -np.inf, np.inf)))
            out[..., ch] = np.where(err != 0, np.clip(step, 0.0, 1.0), c)
    bad = _luma(out) != y
    out[bad] = rgb[bad]
    return ImageBuffer(out, ColorSpace.SRGB)

# ---------------------------------------------------------------------------
# Palette and histogram

PALETTE_SIZE = 180

_PALETTE_GRIDS = {
    # 12 evenly spaced hues x 15 (saturation, value) pairs.
    "hsv12x15-v1": (
        12,
        (0.2, 0.4, 0.6, 0.8, 1.0),
        (1.0 / 3.0, 2.0 / 3.0, 1.0),
    ),
}
DEFAULT_PALETTE = "hsv12x15-v1"


@dataclass(frozen=True)
class Palette:
    version: str
    hsv: np.ndarray = field(repr=False)
    lab: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.lab)

    @property
    def srgb(self) -> np.ndarray:
        return hsv_to_srgb(self.hsv)


_PALETTE_CACHE: dict[str, Palette] = {}


def build_palette(version: str = DEFAULT_PALETTE) -> Palette:
    if version in _PALETTE_CACHE:
        return _PALETTE_CACHE[version]
    try:
        n_hues, sats, vals = _PALETTE_GRIDS[version]
    except KeyError:
        raise ColorError(f"unknown palette version {version!r}") from None
    hsv = np.array(
        [(360.0 * k / n_hues, s, v) for k in range(n_hues) for s in sats for v in vals],
        dtype=np.float64,
    )
    lab = srgb_to_lab(hsv_to_srgb(hsv))
    hsv.setflags(write=False)
    lab.setflags(write=False)
    palette = Palette(version, hsv, lab)
    _PALETTE_CACHE[version] = palette
    return palette


@dataclass(frozen=True)
class ColorHistogram:
    bins: np.ndarray
    palette_version: str = DEFAULT_PALETTE

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64).reshape(-1)
        if bins.shape != (PALETTE_SIZE,):
            raise ColorError(f"histogram must have {PALETTE_SIZE} bins, got {bins.shape[0]}")
        if np.any(bins < 0) or not np.all(np.isfinite(bins)):
            raise ColorError("histogram bins must be finite and non-negative")
        if abs(bins.sum() - 1.0) > 1e-9:
            raise ColorError(f"histogram bins must sum to 1, got {bins.sum()!r}")
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    def to_json(self) -> str:
        return json.dumps({"palette_version": self.palette_version, "bins": [float(b) for b in self.bins]})

    @classmethod
    def from_json(cls, text: str) -> "ColorHistogram":
        obj = json.loads(text)
        return cls(np.asarray(obj["bins"], dtype=np.float64), obj["palette_version"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ColorHistogram":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def nearest_palette_index(lab: np.ndarray, palette: Palette) -> np.ndarray:
    """Index of the nearest palette entry for each LAB row; ties go to the lowest index."""
    lab = lab.reshape(-1, 3)
    out = np.empty(len(lab), dtype=np.intp)
    # Chunked to bound the (N, 180, 3) temporary.
    for start in range(0, len(lab), 4096):
        chunk = lab[start : start + 4096]
        d2 = ((chunk[:, None, :] - palette.lab[None, :, :]) ** 2).sum(axis=2)
        out[start : start + 4096] = np.argmin(d2, axis=1)
    return out


def extract_histogram(img: ImageBuffer, palette: Palette | None = None) -> ColorHistogram:
    if palette is None:
        palette = build_palette()
    if img.space is not ColorSpace.SRGB:
        raise ColorError(f"extract_histogram expects an srgb image, got {img.space.value}")
    if img.empty:
        raise ColorError("cannot build a histogram of an empty image")
    idx = nearest_palette_index(srgb_to_lab(img.data), palette)
    counts = np.bincount(idx, minlength=len(palette)).astype(np.float64)
    return ColorHistogram(counts / counts.sum(), palette.version)


def color_distance(a: ColorHistogram, b: ColorHistogram) -> float:
    if a.palette_version != b.palette_version:
        raise ColorError(
            f"palette versions differ: {a.palette_version!r} vs {b.palette_version!r}"
        )
    return float(np.sqrt(np.sum((a.bins - b.bins) ** 2)))


def one_hot_histogram(k: int, palette_version: str = DEFAULT_PALETTE) -> ColorHistogram:
    bins = np.zeros(PALETTE_SIZE)
    bins[k] = 1.0
    return ColorHistogram(bins, palette_version)
