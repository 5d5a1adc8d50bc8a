"""Synthetic factorized data and the reconstruction training loops.

Images are procedural textures whose intensity bands are painted with a
palette. Texture family and palette are drawn independently per item, so the
style (greyscale structure) and color (palette) factors are disentangled by
construction.

Two loops share one implementation:

* ``stage="base"`` trains the base UNet, caption table and structure encoder
  with the style/color streams switched off. It stands in for the pretrained
  base model that stream training starts from.
* ``stage="streams"`` freezes all of that and trains only the per-site stream
  projections plus the style and color embedders, under the all-blocks
  training policy.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .colorlab import (
    ColorSpace,
    ImageBuffer,
    _luma,
    build_palette,
    extract_histogram,
    greyscale,
)
from .denoiser import (
    ControlEncoder,
    InjectionPolicy,
    ToyUNet,
    condition_residuals,
    encode_image,
    save_policy,
    streams_off_policy,
    training_policy,
)
from .edges import canny
from .embed import ColorEmbedder, FeatureStack, StyleEmbedder, embed_color, compress_style, toy_features
from .sampler import DiffusionSchedule, add_noise, make_schedule
from .tensorcore import OptimizerState, Tensor, adamw_step, checkpoint, ops


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Procedural textures


class TextureFamily(enum.IntEnum):
    STRIPES = 0
    DOTS = 1
    CHECKER = 2
    WAVES = 3


RGB = tuple[float, float, float]


@dataclass(frozen=True)
class SynthSpec:
    family: TextureFamily
    palette: tuple[RGB, ...]
    frequency: float = 3.0  # pattern periods across the image
    angle: float = 0.0  # radians
    thickness: float | None = None  # area share of the first band; None = equal shares
    size: int = 64
    seed: int = 0  # pattern phase
    block: int = 2  # pixels per texture cell side; 2 matches the latent codec

    def __post_init__(self):
        if self.block < 1 or self.size % self.block:
            raise ConfigError(f"size {self.size} must be a multiple of block {self.block}")
        if not 2 <= len(self.palette) <= 4:
            raise ConfigError(f"palette needs 2-4 colors, got {len(self.palette)}")
        if self.frequency <= 0 or self.size < 8:
            raise ConfigError("frequency must be positive and size at least 8")
        if self.thickness is not None and not 0.0 < self.thickness < 1.0:
            raise ConfigError(f"thickness must lie in (0, 1), got {self.thickness}")


def _band_edges(k: int, thickness: float | None) -> np.ndarray:
    if thickness is None:
        return np.arange(1, k) / k
    rest = (1.0 - thickness) / (k - 1)
    return thickness + rest * np.arange(k - 1)


def _texture_field(spec: SynthSpec) -> np.ndarray:
    """Per-pixel value in [0, 1) whose level sets form the texture."""
    n = spec.size // spec.block
    rng = np.random.default_rng(spec.seed)
    phase_a, phase_b = rng.random(2)
    coords = (np.arange(n) + 0.5) / n
    v, u = np.meshgrid(coords, coords, indexing="ij")
    ca, sa = math.cos(spec.angle), math.sin(spec.angle)
    a = spec.frequency * (u * ca + v * sa) + phase_a
    b = spec.frequency * (-u * sa + v * ca) + phase_b
    fam = spec.family
    if fam is TextureFamily.STRIPES:
        return a % 1.0
    if fam is TextureFamily.WAVES:
        return (a + 0.2 * np.sin(2.0 * np.pi * b)) % 1.0
    if fam is TextureFamily.DOTS:
        da, db = a % 1.0 - 0.5, b % 1.0 - 0.5
        r2 = da * da + db * db
        # Rank transform gives equal-area concentric bands.
        ranks = np.argsort(np.argsort(r2, axis=None, kind="stable"), kind="stable")
        return (ranks.reshape(r2.shape) + 0.5) / r2.size
    if fam is TextureFamily.CHECKER:
        k = len(spec.palette)
        cell = np.floor(a).astype(np.int64) + np.floor(b).astype(np.int64)
        return ((cell % k) + 0.5) / k
    raise ConfigError(f"unknown texture family {fam!r}")


def gen_synthetic(spec: SynthSpec) -> ImageBuffer:
    """Texture rendered on ``block x block`` cells, each band filled with one palette color.

    With the default block of 2 every 2x2 cell is flat, so the average-pool
    encode and nearest-neighbour decode reproduce the image exactly.
    """
    k = len(spec.palette)
    f = _texture_field(spec)
    thickness = None if spec.family is TextureFamily.CHECKER else spec.thickness
    band = np.searchsorted(_band_edges(k, thickness), f, side="right")
    colors = np.asarray(spec.palette, dtype=np.float64)
    img = colors[band].repeat(spec.block, axis=0).repeat(spec.block, axis=1)
    return ImageBuffer(img, ColorSpace.SRGB)


# ---------------------------------------------------------------------------
# Palettes and dataset configuration


def parse_color(c) -> RGB:
    """A palette index (int) or ``"#rrggbb"``."""
    if isinstance(c, (int, np.integer)):
        rgb = build_palette().srgb[int(c)]
        return (float(rgb[0]), float(rgb[1]), float(rgb[2]))
    if isinstance(c, str) and len(c) == 7 and c.startswith("#"):
        try:
            return tuple(int(c[i : i + 2], 16) / 255.0 for i in (1, 3, 5))  # type: ignore[return-value]
        except ValueError:
            pass
    if isinstance(c, (list, tuple)) and len(c) == 3:
        return (float(c[0]), float(c[1]), float(c[2]))
    raise ConfigError(f"cannot read color {c!r}: use a palette index, '#rrggbb' or an [r, g, b] triple")


def sample_palette(rng: np.random.Generator, k: int, min_luma_gap: float = 0.25) -> tuple[int, ...]:
    """``k`` palette indices with pairwise luma gaps of at least ``min_luma_gap``, darkest first."""
    pal = build_palette()
    luma = _luma(pal.srgb)
    for _ in range(10000):
        idx = rng.choice(len(pal), size=k, replace=False)
        ys = np.sort(luma[idx])
        if np.all(np.diff(ys) >= min_luma_gap):
            return tuple(int(i) for i in idx[np.argsort(luma[idx], kind="stable")])
    # Wide gaps make random k-sets rare; fall back to a greedy pass over shuffled
    # luma-spaced entries (dark to bright), retried a few times.
    for _ in range(100):
        picked: list[int] = []
        for i in sorted(rng.permutation(len(pal)), key=lambda j: luma[j] + rng.random() * min_luma_gap):
            if all(abs(luma[i] - luma[j]) >= min_luma_gap for j in picked):
                picked.append(int(i))
            if len(picked) == k:
                return tuple(sorted(picked, key=lambda j: luma[j]))
    raise ConfigError(f"could not draw a {k}-color palette with luma gap {min_luma_gap}")


def make_palette_pool(n: int, sizes: Sequence[int] = (2, 3, 4), seed: int = 0) -> list[tuple[int, ...]]:
    rng = np.random.default_rng(seed)
    return [sample_palette(rng, int(rng.choice(sizes))) for _ in range(n)]


@dataclass(frozen=True)
class DatasetConfig:
    families: tuple[TextureFamily, ...]
    palette_pool: tuple[tuple, ...]  # each palette: colors as accepted by parse_color
    count: int
    seed: int = 0
    size: int = 64
    frequency_range: tuple[float, float] = (1.5, 3.5)

    def __post_init__(self):
        if not self.families or not self.palette_pool or self.count < 1:
            raise ConfigError("dataset needs families, a palette pool and a positive count")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        missing = {"families", "palette_pool", "count", "seed"} - set(d)
        if missing:
            raise ConfigError(f"dataset config is missing {sorted(missing)}")
        fams = tuple(TextureFamily[str(f).upper()] if not isinstance(f, int) else TextureFamily(f) for f in d["families"])
        pool = d["palette_pool"]
        if isinstance(pool, dict):  # generated pool: {"count", "sizes", "seed"}
            pool = make_palette_pool(int(pool["count"]), tuple(pool.get("sizes", (2, 3, 4))), int(pool.get("seed", 0)))
        pool = tuple(tuple(p) for p in pool)
        extra = {k: d[k] for k in ("size",) if k in d}
        if "frequency_range" in d:
            extra["frequency_range"] = tuple(d["frequency_range"])
        return cls(fams, pool, int(d["count"]), int(d["seed"]), **extra)

    def to_dict(self) -> dict:
        return {
            "families": [f.name for f in self.families],
            "palette_pool": [list(p) for p in self.palette_pool],
            "count": self.count,
            "seed": self.seed,
            "size": self.size,
            "frequency_range": list(self.frequency_range),
        }


@dataclass(frozen=True)
class ItemIds:
    family: TextureFamily
    palette_id: int


def item_spec(cfg: DatasetConfig, i: int) -> tuple[SynthSpec, ItemIds]:
    """The ``i``-th dataset item. Family and palette ids are independent draws."""
    rng = np.random.default_rng([cfg.seed, i])
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    pid = int(rng.integers(len(cfg.palette_pool)))
    lo, hi = cfg.frequency_range
    spec = SynthSpec(
        family=family,
        palette=tuple(parse_color(c) for c in cfg.palette_pool[pid]),
        frequency=float(rng.uniform(lo, hi)),
        angle=float(rng.uniform(0.0, np.pi)),
        size=cfg.size,
        seed=int(rng.integers(2**31)),
    )
    return spec, ItemIds(family, pid)


@dataclass
class Prepared:
    """Everything a training step needs from one image."""

    latent: np.ndarray
    features: FeatureStack
    hist: np.ndarray
    edges: np.ndarray
    family: int


def prepare_image(img: ImageBuffer, family: int) -> Prepared:
    return Prepared(
        latent=encode_image(img),
        features=toy_features(greyscale(img)),
        hist=extract_histogram(img).bins,
        edges=canny(img).data,
        family=int(family),
    )


def build_dataset(cfg: DatasetConfig) -> list[Prepared]:
    out = []
    for i in range(cfg.count):
        spec, ids = item_spec(cfg, i)
        out.append(prepare_image(gen_synthetic(spec), int(ids.family)))
    return out


def load_config(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


# ---------------------------------------------------------------------------
# Model bundle


class ModelBundle:
    """Base UNet, structure encoder, style and color embedders."""

    def __init__(self, seed: int = 0):
        self.unet = ToyUNet(seed=seed)
        self.control = ControlEncoder(self.unet.control_widths, seed=seed + 3)
        self.style = StyleEmbedder(seed=seed + 1)
        self.color = ColorEmbedder(seed=seed + 2)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "base": self.unet.base,
            "streams": self.unet.streams.params,
            "control": self.control.params,
            "style": self.style.params,
            "color": self.color.params,
        }

    def parameters(self, groups: Sequence[str] | None = None) -> dict[str, Tensor]:
        out = {}
        for g, params in self.groups().items():
            if groups is None or g in groups:
                out.update({f"{g}.{k}": v for k, v in params.items()})
        return out

    def set_trainable(self, groups: Sequence[str]) -> None:
        for g, params in self.groups().items():
            for t in params.values():
                t.requires_grad = g in groups

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state(self, entries: dict[str, np.ndarray], groups: Sequence[str] | None = None) -> None:
        params = self.parameters(groups)
        missing = set(params) - set(entries)
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[0]!r}")
        for k, t in params.items():
            if entries[k].shape != t.shape:
                raise checkpoint.CheckpointError(f"{k}: checkpoint shape {entries[k].shape} != model {t.shape}")
            t.data = np.array(entries[k], dtype=np.float64)

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.state())

    @classmethod
    def load(cls, path: str | Path, groups: Sequence[str] | None = None) -> "ModelBundle":
        b = cls()
        b.load_state(checkpoint.load(path), groups)
        return b


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8  # per micro-batch
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    grad_accum: int = 1
    text_dropout: float = 0.1
    cond_dropout: float = 0.5  # base stage only

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("steps, batch_size and grad_accum must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if not 0.0 <= self.text_dropout <= 1.0 or not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError("dropout probabilities must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


STAGE_GROUPS = {"base": ("base", "control"), "streams": ("streams", "style", "color")}


def _noise_draws(seed: int, step: int, slot: int, shape, T: int, text_dropout: float, cond_dropout: float):
    rng = np.random.default_rng([seed, step, slot])
    t = int(rng.integers(1, T + 1))
    eps = rng.standard_normal(shape)
    drop_text = bool(rng.random() < text_dropout)
    drop_cond = bool(rng.random() < cond_dropout)
    return t, eps, drop_text, drop_cond


def batch_loss(
    bundle: ModelBundle,
    items: Sequence[Prepared],
    slots: Sequence[int],
    step: int,
    cfg: TrainConfig,
    sched: DiffusionSchedule,
    stage: str,
) -> Tensor:
    """Mean squared noise-prediction error over ``items``."""
    unet = bundle.unet
    ts, noisy, targets, families, keep_cond = [], [], [], [], []
    for item, slot in zip(items, slots):
        t, eps, drop_text, drop_cond = _noise_draws(
            cfg.seed, step, slot, item.latent.shape, sched.T, cfg.text_dropout, cfg.cond_dropout
        )
        ts.append(t)
        noisy.append(add_noise(item.latent, eps, t, sched))
        targets.append(eps)
        families.append(None if drop_text else item.family)
        keep_cond.append(0.0 if drop_cond else 1.0)
    x = np.stack(noisy)
    e_t = unet.text_tokens(families)
    if stage == "base":
        res = condition_residuals(np.stack([it.edges for it in items]), bundle.control, 1.0)
        mask = Tensor(np.asarray(keep_cond)[:, None, None, None])
        res = [ops.mul(r, mask) for r in res]
        pred = unet(x, np.asarray(ts), e_t, None, None, streams_off_policy(unet.registry), res)
    else:
        e_s = compress_style([it.features for it in items], bundle.style)
        e_c = embed_color(np.stack([it.hist for it in items]), bundle.color)
        pred = unet(x, np.asarray(ts), e_t, e_s, e_c, training_policy(unet.registry))
    return ops.mse(pred, Tensor(np.stack(targets)))


def _step_indices(cfg: TrainConfig, step: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, step, 2**32 - 1])
    return rng.integers(n, size=cfg.batch_size * cfg.grad_accum)


def train_step(
    bundle: ModelBundle,
    data: Sequence[Prepared],
    state: OptimizerState,
    cfg: TrainConfig,
    sched: DiffusionSchedule,
    step: int,
    stage: str = "streams",
) -> float:
    """One optimizer update (``grad_accum`` micro-batches). Returns the mean loss."""
    if stage not in STAGE_GROUPS:
        raise ConfigError(f"unknown stage {stage!r}")
    params = bundle.parameters(STAGE_GROUPS[stage])
    for p in params.values():
        p.grad = None
    idx = _step_indices(cfg, step, len(data))
    total = 0.0
    for m in range(cfg.grad_accum):
        sl = slice(m * cfg.batch_size, (m + 1) * cfg.batch_size)
        slots = list(range(sl.start, sl.stop))
        loss = batch_loss(bundle, [data[i] for i in idx[sl]], slots, step, cfg, sched, stage)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}, micro-batch {m}")
        ops.scale(loss, 1.0 / cfg.grad_accum).backward()
        total += value
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    adamw_step(params, grads, state)
    for p in params.values():
        p.grad = None
    return total / cfg.grad_accum


@dataclass
class TrainResult:
    bundle: ModelBundle
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(
    cfg: TrainConfig,
    data: Sequence[Prepared],
    bundle: ModelBundle | None = None,
    stage: str = "streams",
    sched: DiffusionSchedule | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    bundle = bundle or ModelBundle()
    sched = sched or make_schedule()
    bundle.set_trainable(STAGE_GROUPS[stage])
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(bundle)
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        loss = train_step(bundle, data, state, cfg, sched, step, stage)
        result.losses.append(loss)
        if progress is not None:
            progress(step, loss)
    result.seconds = time.perf_counter() - start
    bundle.set_trainable(())
    return result


def write_outputs(result: TrainResult, out_dir: str | Path, policy: InjectionPolicy | None = None) -> dict[str, Path]:
    """Checkpoint, policy sidecar and loss curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "model.ckpt", "policy": out / "policy.json", "losses": out / "loss.csv"}
    result.bundle.save(paths["checkpoint"])
    save_policy(paths["policy"], policy or training_policy(result.bundle.unet.registry))
    with open(paths["losses"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses, start=1):
            w.writerow([i, repr(loss)])
    return paths


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def toy_recipe() -> dict:
    """The reference toy run as a ``cdst train`` config.

    The base stage stands in for the pretrained model; the streams stage is the
    2000-step run whose loss curve the acceptance suite checks.
    """
    return {
        "dataset": {
            "families": [f.name.lower() for f in TextureFamily],
            "palette_pool": {"count": 64, "sizes": [2, 3, 4], "seed": 11},
            "count": 512,
            "seed": 0,
        },
        "pretrain": {"steps": 3000, "lr": 1e-3, "seed": 5},
        "train": {"steps": 2000, "lr": 1e-3, "seed": 1},
        "output": "run",
    }
