"""Style and color stream embeddings.

The style stream sees only a greyscale image. A frozen random convolutional
stack stands in for the pretrained feature extractor; its shallow grids are
each reduced to one token by a position-wise MLP and a mean pool, and its
deep grid (plus a pooled cls vector) is compressed to 4 tokens by a small
query-token transformer. The color stream inflates a 180-bin histogram into
4 tokens with an MLP.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .colorlab import PALETTE_SIZE, ColorError, ColorHistogram, ColorSpace, ImageBuffer
from .tensorcore import Tensor, checkpoint, no_grad, ops, parameter

STYLE_TOKENS = 7
COLOR_TOKENS = 4
DEEP_TOKENS = 4
DEFAULT_EMBED_DIM = 64


class EmbedError(ValueError):
    pass


class TokenKind(str, enum.Enum):
    STYLE = "style"
    COLOR = "color"
    TEXT = "text"


_EXPECTED_COUNT = {TokenKind.STYLE: STYLE_TOKENS, TokenKind.COLOR: COLOR_TOKENS}


@dataclass
class TokenSet:
    """Tokens of shape ``(n, d_e)`` or batched ``(B, n, d_e)``."""

    tokens: Tensor
    kind: TokenKind

    def __post_init__(self):
        shape = self.tokens.shape
        if len(shape) not in (2, 3):
            raise EmbedError(f"tokens must be (n, d) or (B, n, d), got {shape}")
        expected = _EXPECTED_COUNT.get(self.kind)
        if expected is not None and shape[-2] != expected:
            raise EmbedError(f"{self.kind.value} token set needs {expected} tokens, got {shape[-2]}")

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def batched(self) -> Tensor:
        t = self.tokens
        return ops.reshape(t, (1,) + t.shape) if t.ndim == 2 else t


@dataclass(frozen=True)
class ExtractorSpec:
    blocks: int
    shallow_taps: tuple[int, ...]
    deep_tap: int
    width: int

    def __post_init__(self):
        taps = tuple(self.shallow_taps)
        if not taps or list(taps) != sorted(set(taps)):
            raise EmbedError("shallow taps must be non-empty and strictly increasing")
        if self.deep_tap != self.blocks - 1:
            raise EmbedError("deep tap must be the last block")
        if taps[-1] >= self.deep_tap or taps[0] < 0:
            raise EmbedError("shallow taps must precede the deep tap")


TOY_EXTRACTOR = ExtractorSpec(blocks=8, shallow_taps=(1, 3, 5), deep_tap=7, width=32)
# Layout for features computed outside this package by a 50-block ViT.
PAPER_EXTRACTOR = ExtractorSpec(blocks=50, shallow_taps=(5, 11, 17), deep_tap=49, width=1536)


@dataclass
class FeatureStack:
    grids: list[tuple[int, np.ndarray]]  # (block index, (h*w, c))
    cls: np.ndarray | None = None

    def __post_init__(self):
        idx = [b for b, _ in self.grids]
        if any(b2 <= b1 for b1, b2 in zip(idx, idx[1:])):
            raise EmbedError("feature grids must have strictly increasing block indices")
        widths = {g.shape[-1] for _, g in self.grids}
        if len(widths) > 1:
            raise EmbedError(f"feature grids disagree on channel width: {sorted(widths)}")

    @property
    def width(self) -> int:
        return self.grids[0][1].shape[-1]

    def to_entries(self) -> dict[str, np.ndarray]:
        out = {f"grid.{b}": g for b, g in self.grids}
        if self.cls is not None:
            out["cls"] = self.cls
        return out

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "FeatureStack":
        grids = sorted((int(k.split(".", 1)[1]), v) for k, v in entries.items() if k.startswith("grid."))
        return cls(grids, entries.get("cls"))

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.to_entries())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStack":
        return cls.from_entries(checkpoint.load(path))


def _extractor_weights(spec: ExtractorSpec, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    weights = []
    cin = 1
    for _ in range(spec.blocks):
        weights.append(rng.standard_normal((3, 3, cin, spec.width)) * np.sqrt(2.0 / (9 * cin)))
        cin = spec.width
    return weights


def toy_features(grey_img: ImageBuffer, spec: ExtractorSpec = TOY_EXTRACTOR, frozen_seed: int = 0) -> FeatureStack:
    """Frozen random conv stack over a greyscale image.

    Even-indexed blocks downsample by 2 while the grid is larger than 4x4.
    """
    if grey_img.space is not ColorSpace.GREY:
        raise EmbedError(f"toy_features takes a greyscale image, got {grey_img.space.value}")
    taps = set(spec.shallow_taps) | {spec.deep_tap}
    x = Tensor(grey_img.data[None] * 2.0 - 1.0)
    grids = []
    with no_grad():
        for i, w in enumerate(_extractor_weights(spec, frozen_seed)):
            stride = 2 if i % 2 == 0 and min(x.shape[1:3]) > 4 else 1
            x = ops.gelu(ops.layer_norm(ops.conv2d(x, w, stride=stride)))
            if i in taps:
                grids.append((i, x.data[0].reshape(-1, spec.width).copy()))
    cls = grids[-1][1].mean(axis=0)
    return FeatureStack(grids, cls)


def _init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * gain / np.sqrt(fan_in)


class StyleEmbedder:
    """Shallow MLP-pool tokens followed by 4 query-compressed deep tokens."""

    def __init__(self, spec: ExtractorSpec = TOY_EXTRACTOR, d_e: int = DEFAULT_EMBED_DIM, seed: int = 1, layers: int = 2):
        self.spec = spec
        self.d_e = d_e
        self.layers = layers
        rng = np.random.default_rng(seed)
        c = spec.width
        p: dict[str, Tensor] = {}
        for tap in spec.shallow_taps:
            p[f"shallow.{tap}.w1"] = parameter(_init(rng, (c, d_e), c))
            p[f"shallow.{tap}.b1"] = parameter(np.zeros(d_e))
            p[f"shallow.{tap}.w2"] = parameter(_init(rng, (d_e, d_e), d_e))
            p[f"shallow.{tap}.b2"] = parameter(np.zeros(d_e))
        p["deep.in"] = parameter(_init(rng, (c, d_e), c))
        p["deep.queries"] = parameter(rng.standard_normal((DEEP_TOKENS, d_e)))
        for layer in range(layers):
            pre = f"deep.l{layer}."
            for name in ("ln_q", "ln_kv", "ln_ff"):
                p[pre + name + ".g"] = parameter(np.ones(d_e))
                p[pre + name + ".b"] = parameter(np.zeros(d_e))
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = parameter(_init(rng, (d_e, d_e), d_e))
            p[pre + "ff1"] = parameter(_init(rng, (d_e, 2 * d_e), d_e))
            p[pre + "ff2"] = parameter(_init(rng, (2 * d_e, d_e), 2 * d_e))
        p["deep.out.g"] = parameter(np.ones(d_e))
        p["deep.out.b"] = parameter(np.zeros(d_e))
        self.params = p

    def __call__(self, stacks: FeatureStack | Sequence[FeatureStack]) -> TokenSet:
        return compress_style(stacks, self)


def _stack_grids(stacks: Sequence[FeatureStack], block: int) -> np.ndarray:
    try:
        return np.stack([dict(s.grids)[block] for s in stacks])
    except KeyError:
        raise EmbedError(f"feature stack has no grid for block {block}") from None


def compress_style(stacks: FeatureStack | Sequence[FeatureStack], weights: StyleEmbedder) -> TokenSet:
    single = isinstance(stacks, FeatureStack)
    batch = [stacks] if single else list(stacks)
    spec, p = weights.spec, weights.params
    if any(dict(s.grids).get(spec.deep_tap) is None for s in batch):
        raise EmbedError(f"feature stack is missing the deep grid (block {spec.deep_tap})")
    tokens = []
    for tap in spec.shallow_taps:
        g = Tensor(_stack_grids(batch, tap))  # (B, hw, c)
        h = ops.gelu(ops.linear(g, p[f"shallow.{tap}.w1"], p[f"shallow.{tap}.b1"]))
        h = ops.linear(h, p[f"shallow.{tap}.w2"], p[f"shallow.{tap}.b2"])
        tokens.append(_pool_token(h))
    deep = _stack_grids(batch, spec.deep_tap)
    cls = np.stack([s.cls if s.cls is not None else dict(s.grids)[spec.deep_tap].mean(axis=0) for s in batch])
    seq = Tensor(np.concatenate([cls[:, None, :], deep], axis=1))  # cls prepended
    mem = ops.matmul(seq, p["deep.in"])
    B = len(batch)
    q = ops.add(Tensor(np.zeros((B, DEEP_TOKENS, weights.d_e))), p["deep.queries"])
    for layer in range(weights.layers):
        pre = f"deep.l{layer}."
        qn = ops.layer_norm(q, p[pre + "ln_q.g"], p[pre + "ln_q.b"])
        kv = ops.layer_norm(ops.concat([q, mem], axis=1), p[pre + "ln_kv.g"], p[pre + "ln_kv.b"])
        att = ops.attention(ops.matmul(qn, p[pre + "wq"]), ops.matmul(kv, p[pre + "wk"]), ops.matmul(kv, p[pre + "wv"]))
        q = ops.add(q, ops.matmul(att, p[pre + "wo"]))
        f = ops.layer_norm(q, p[pre + "ln_ff.g"], p[pre + "ln_ff.b"])
        q = ops.add(q, ops.matmul(ops.gelu(ops.matmul(f, p[pre + "ff1"])), p[pre + "ff2"]))
    tokens.append(ops.layer_norm(q, p["deep.out.g"], p["deep.out.b"]))
    out = ops.concat(tokens, axis=1)
    if single:
        out = ops.reshape(out, out.shape[1:])
    return TokenSet(out, TokenKind.STYLE)


def _pool_token(h: Tensor) -> Tensor:
    pooled = ops.mean_pool(h, axis=1)  # (B, d)
    return ops.reshape(pooled, (pooled.shape[0], 1, pooled.shape[1]))


class ColorEmbedder:
    """180 -> hidden -> 4 * d_e MLP."""

    def __init__(self, d_e: int = DEFAULT_EMBED_DIM, hidden: int = 256, seed: int = 2):
        self.d_e = d_e
        rng = np.random.default_rng(seed)
        # Histograms are sparse with unit mass, so the first layer uses unit-scale weights.
        self.params = {
            "w1": parameter(rng.standard_normal((PALETTE_SIZE, hidden))),
            "b1": parameter(np.zeros(hidden)),
            "w2": parameter(_init(rng, (hidden, COLOR_TOKENS * d_e), hidden)),
            "b2": parameter(np.zeros(COLOR_TOKENS * d_e)),
        }

    def __call__(self, hists: ColorHistogram | Sequence[ColorHistogram]) -> TokenSet:
        return embed_color(hists, self)


def embed_color(hists: ColorHistogram | Sequence[ColorHistogram] | np.ndarray, weights: ColorEmbedder) -> TokenSet:
    single = isinstance(hists, ColorHistogram)
    if isinstance(hists, np.ndarray):
        x = np.atleast_2d(hists)
        single = hists.ndim == 1
    else:
        x = np.stack([h.bins for h in ([hists] if single else hists)])
    if x.shape[-1] != PALETTE_SIZE:
        raise ColorError(f"color histogram must have {PALETTE_SIZE} bins, got {x.shape[-1]}")
    p = weights.params
    h = ops.gelu(ops.linear(Tensor(x), p["w1"], p["b1"]))
    out = ops.linear(h, p["w2"], p["b2"])
    out = ops.reshape(out, (x.shape[0], COLOR_TOKENS, weights.d_e))
    if single:
        out = ops.reshape(out, out.shape[1:])
    return TokenSet(out, TokenKind.COLOR)
