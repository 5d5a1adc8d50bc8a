"""Toy denoising UNet with the 70-site cross-attention layout of SDXL.

Every cross-attention site computes::

    O = attn(Q, K_t, V_t) + lam_s * attn(Q, K_s, V_s) + lam_c * attn(Q, K_c, V_c)

where the text keys/values come from frozen base projections and the style
and color keys/values from per-site trainable projections. The per-site
``lam_s``, ``lam_c`` and style mask come from an :class:`InjectionPolicy`.

Tensors inside the network are channels-last ``(B, H, W, C)``; the public
forward takes and returns ``(C, H, W)`` or ``(B, C, H, W)`` latents.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .colorlab import ColorSpace, ImageBuffer
from .edges import EdgeMap
from .embed import DEFAULT_EMBED_DIM, TokenKind, TokenSet
from .tensorcore import ShapeError, Tensor, ops, parameter

LATENT_CHANNELS = 3
TEXT_TOKENS = 4
N_FAMILIES = 4


class LayoutError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Block registry and injection policies


@dataclass(frozen=True)
class BlockRegistry:
    total: int
    encoder_range: tuple[int, int]
    middle_range: tuple[int, int]
    decoder_range: tuple[int, int]
    # (stage, level, transformer depth) for every transformer group, in flat order.
    groups: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self):
        e, m, d = self.encoder_range, self.middle_range, self.decoder_range
        if not (e[0] == 0 and e[1] == m[0] and m[1] == d[0] and d[1] == self.total):
            raise LayoutError("encoder/middle/decoder ranges must partition [0, total)")
        if self.groups and sum(g[2] for g in self.groups) != self.total:
            raise LayoutError("transformer group depths must add up to the block total")

    def stage_of(self, idx: int) -> str:
        if not 0 <= idx < self.total:
            raise LayoutError(f"block index {idx} outside [0, {self.total})")
        if idx < self.encoder_range[1]:
            return "encoder"
        if idx < self.middle_range[1]:
            return "middle"
        return "decoder"


def build_sdxl_layout() -> BlockRegistry:
    """70 sites: encoder 2x2 + 2x10, middle 10, decoder 3x10 + 3x2."""
    groups = (
        (("encoder", 1, 2),) * 2
        + (("encoder", 2, 10),) * 2
        + (("middle", 2, 10),)
        + (("decoder", 2, 10),) * 3
        + (("decoder", 1, 2),) * 3
    )
    return BlockRegistry(70, (0, 24), (24, 34), (34, 70), groups)


@dataclass
class InjectionPolicy:
    lambda_s: np.ndarray
    lambda_c: np.ndarray
    style_active: np.ndarray

    def __post_init__(self):
        self.lambda_s = np.asarray(self.lambda_s, dtype=np.float64)
        self.lambda_c = np.asarray(self.lambda_c, dtype=np.float64)
        self.style_active = np.asarray(self.style_active, dtype=bool)
        n = len(self.lambda_s)
        if len(self.lambda_c) != n or len(self.style_active) != n:
            raise LayoutError("policy arrays must have equal length")
        if np.any(self.lambda_s[~self.style_active] != 0.0):
            raise LayoutError("lambda_s must be 0 where style is inactive")

    def __len__(self) -> int:
        return len(self.lambda_s)

    def to_json(self) -> str:
        return json.dumps(
            {
                "lambda_s": [float(x) for x in self.lambda_s],
                "lambda_c": [float(x) for x in self.lambda_c],
                "style_active": [bool(x) for x in self.style_active],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "InjectionPolicy":
        obj = json.loads(text)
        return cls(obj["lambda_s"], obj["lambda_c"], obj["style_active"])

    def with_color_weight(self, weight: float) -> "InjectionPolicy":
        return InjectionPolicy(self.lambda_s.copy(), np.full(len(self), float(weight)), self.style_active.copy())


CDST_LOW_SLICE = (0, 14)
CDST_HIGH_SLICE = (44, 70)
CDST_LOW_WEIGHT = 0.2
CDST_HIGH_WEIGHT = 0.9


def cdst_inference_policy(
    registry: BlockRegistry,
    style_weight: float = CDST_HIGH_WEIGHT,
    low_weight: float = CDST_LOW_WEIGHT,
    color_weight: float = 1.0,
) -> InjectionPolicy:
    """Style on sites [0, 14) at ``low_weight`` and [44, 70) at ``style_weight``; color everywhere."""
    if registry.total < CDST_HIGH_SLICE[1]:
        raise LayoutError(f"the inference policy needs 70 sites, registry has {registry.total}")
    n = registry.total
    active = np.zeros(n, dtype=bool)
    lam_s = np.zeros(n)
    lo, hi = slice(*CDST_LOW_SLICE), slice(*CDST_HIGH_SLICE)
    active[lo] = active[hi] = True
    lam_s[lo] = low_weight
    lam_s[hi] = style_weight
    return InjectionPolicy(lam_s, np.full(n, float(color_weight)), active)


def training_policy(registry: BlockRegistry) -> InjectionPolicy:
    n = registry.total
    return InjectionPolicy(np.ones(n), np.ones(n), np.ones(n, dtype=bool))


def streams_off_policy(registry: BlockRegistry) -> InjectionPolicy:
    n = registry.total
    return InjectionPolicy(np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool))


# ---------------------------------------------------------------------------
# Network


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = LATENT_CHANNELS
    widths: tuple[int, int, int] = (32, 64, 64)
    d_e: int = DEFAULT_EMBED_DIM
    t_dim: int = 64
    t_hidden: int = 128
    control_hidden: int = 16


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding, ``(B,) -> (B, dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def normal(self, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
        return self.rng.standard_normal(shape) * gain / math.sqrt(fan_in)


@dataclass
class StreamProjections:
    """Per-site ``W^K_s, W^V_s, W^K_c, W^V_c`` of shape ``(d_e, C_site)``."""

    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, registry: BlockRegistry, site_widths: Sequence[int], d_e: int, seed: int = 7, v_gain: float = 0.1):
        init = _Init(seed)
        p = {}
        for i in range(registry.total):
            c = site_widths[i]
            p[f"{i}.k_s"] = parameter(init.normal((d_e, c), d_e))
            p[f"{i}.v_s"] = parameter(init.normal((d_e, c), d_e, v_gain))
            p[f"{i}.k_c"] = parameter(init.normal((d_e, c), d_e))
            p[f"{i}.v_c"] = parameter(init.normal((d_e, c), d_e, v_gain))
        return cls(p)

    def zero_(self) -> None:
        for t in self.params.values():
            t.data = np.zeros_like(t.data)


class ToyUNet:
    """Base UNet (frozen during stream training) plus per-site stream projections."""

    def __init__(self, config: UNetConfig = UNetConfig(), registry: BlockRegistry | None = None, seed: int = 0):
        self.config = config
        self.registry = registry or build_sdxl_layout()
        self.base: dict[str, Tensor] = {}
        self._site_width: list[int] = []
        self._plan: list[tuple] = []
        self._build(seed)
        self.streams = StreamProjections.init(self.registry, self._site_width, config.d_e, seed=seed + 1000)

    # -- construction -----------------------------------------------------------
    def _param(self, name: str, data: np.ndarray) -> None:
        self.base[name] = parameter(data, name=name)

    def _ln(self, name: str, c: int) -> None:
        self._param(name + ".g", np.ones(c))
        self._param(name + ".b", np.zeros(c))

    def _res(self, name: str, cin: int, cout: int, init: _Init) -> None:
        # 1x1 projection to the output width, timestep shift, norm, one 3x3 conv.
        cfg = self.config
        self._param(name + ".proj", init.normal((cin, cout), cin))
        self._param(name + ".projb", np.zeros(cout))
        self._param(name + ".temb", init.normal((cfg.t_hidden, cout), cfg.t_hidden))
        self._ln(name + ".ln", cout)
        self._param(name + ".conv", init.normal((3, 3, cout, cout), 9 * cout, 0.3))
        self._param(name + ".convb", np.zeros(cout))
        if cin != cout:
            self._param(name + ".skip", init.normal((cin, cout), cin))

    def _attn(self, idx: int, c: int, init: _Init) -> None:
        d_e = self.config.d_e
        pre = f"attn.{idx}"
        self._ln(pre + ".ln", c)
        self._param(pre + ".q", init.normal((c, c), c))
        self._param(pre + ".k_t", init.normal((d_e, c), d_e))
        self._param(pre + ".v_t", init.normal((d_e, c), d_e))
        self._param(pre + ".o", init.normal((c, c), c, 0.5))
        self._site_width.append(c)

    def _build(self, seed: int) -> None:
        cfg = self.config
        init = _Init(seed)
        w0, w1, w2 = cfg.widths
        widths = {0: w0, 1: w1, 2: w2}
        self._param("text.table", init.normal((N_FAMILIES * TEXT_TOKENS, cfg.d_e), 1))
        self._param("text.null", init.normal((TEXT_TOKENS, cfg.d_e), 1))
        self._param("time.w1", init.normal((cfg.t_dim, cfg.t_hidden), cfg.t_dim))
        self._param("time.b1", np.zeros(cfg.t_hidden))
        self._param("time.w2", init.normal((cfg.t_hidden, cfg.t_hidden), cfg.t_hidden))
        self._param("time.b2", np.zeros(cfg.t_hidden))
        self._param("conv_in", init.normal((3, 3, cfg.latent_channels, w0), 9 * cfg.latent_channels))
        self._param("conv_in.b", np.zeros(w0))

        depth = {}
        for stage, level, d in self.registry.groups:
            depth.setdefault((stage, level), []).append(d)

        plan: list[tuple] = []
        site = 0
        skips: list[int] = [w0]
        ch = w0
        plan.append(("control", 0))
        plan.append(("push",))
        # Encoder: 2 resnets per level (1 at full resolution), transformer after
        # each resnet where present. The decoder runs one more resnet per level.
        n_res = {0: 1, 1: 2, 2: 2}
        for level in range(3):
            cout = widths[level]
            groups = depth.get(("encoder", level), [])
            for r in range(n_res[level]):
                name = f"down{level}.res{r}"
                self._res(name, ch, cout, init)
                ch = cout
                plan.append(("res", name))
                if groups:
                    ids = list(range(site, site + groups[r]))
                    for i in ids:
                        self._attn(i, ch, init)
                    site += groups[r]
                    plan.append(("attn", ids))
                plan.append(("push",))
                skips.append(ch)
            if level < 2:
                name = f"down{level}.ds"
                self._param(name, init.normal((3, 3, ch, ch), 9 * ch))
                self._param(name + ".b", np.zeros(ch))
                plan.append(("down", name))
                plan.append(("control", level + 1))
                plan.append(("push",))
                skips.append(ch)
        # Middle.
        self._res("mid.res0", ch, ch, init)
        plan.append(("res", "mid.res0"))
        (mdepth,) = depth[("middle", 2)]
        ids = list(range(site, site + mdepth))
        for i in ids:
            self._attn(i, ch, init)
        site += mdepth
        plan.append(("attn", ids))
        self._res("mid.res1", ch, ch, init)
        plan.append(("res", "mid.res1"))
        for level in (2, 1, 0):
            cout = widths[level]
            groups = depth.get(("decoder", level), [])
            for r in range(n_res[level] + 1):
                skip_ch = skips.pop()
                name = f"up{level}.res{r}"
                self._res(name, ch + skip_ch, cout, init)
                ch = cout
                plan.append(("pop_res", name))
                if groups:
                    ids = list(range(site, site + groups[r]))
                    for i in ids:
                        self._attn(i, ch, init)
                    site += groups[r]
                    plan.append(("attn", ids))
            if level > 0:
                plan.append(("up",))
        if site != self.registry.total:
            raise LayoutError(f"built {site} cross-attention sites, registry expects {self.registry.total}")
        self._ln("out.ln", ch)
        self._param("conv_out", init.normal((3, 3, ch, cfg.latent_channels), 9 * ch, 0.1))
        self._param("conv_out.b", np.zeros(cfg.latent_channels))
        self._plan = plan
        self.control_widths = (w0, w0, w1)

    # -- parameters -------------------------------------------------------------
    @property
    def site_widths(self) -> list[int]:
        return list(self._site_width)

    def freeze_base(self, frozen: bool = True) -> None:
        for t in self.base.values():
            t.requires_grad = not frozen

    def parameters(self) -> dict[str, Tensor]:
        out = {f"base.{k}": v for k, v in self.base.items()}
        out.update({f"streams.{k}": v for k, v in self.streams.params.items()})
        return out

    # -- text stream -------------------------------------------------------------
    def text_tokens(self, families: Sequence[int | None]) -> TokenSet:
        """Caption tokens per sample; ``None`` selects the null caption."""
        rows = []
        table, null = self.base["text.table"], self.base["text.null"]
        for fam in families:
            if fam is None:
                rows.append(ops.reshape(null, (1, TEXT_TOKENS, self.config.d_e)))
            else:
                if not 0 <= fam < N_FAMILIES:
                    raise LayoutError(f"caption family {fam} outside [0, {N_FAMILIES})")
                block = _rows(table, fam * TEXT_TOKENS, (fam + 1) * TEXT_TOKENS)
                rows.append(ops.reshape(block, (1, TEXT_TOKENS, self.config.d_e)))
        return TokenSet(ops.concat(rows, axis=0), TokenKind.TEXT)

    # -- forward -----------------------------------------------------------------
    def _res_fwd(self, name: str, x: Tensor, temb: Tensor) -> Tensor:
        b = self.base
        h = ops.linear(x, b[name + ".proj"], b[name + ".projb"])
        tproj = ops.matmul(temb, b[name + ".temb"])
        h = ops.add(h, ops.reshape(tproj, (tproj.shape[0], 1, 1, tproj.shape[1])))
        h = ops.gelu(ops.layer_norm(h, b[name + ".ln.g"], b[name + ".ln.b"]))
        h = ops.conv2d(h, b[name + ".conv"], b[name + ".convb"])
        skip = ops.matmul(x, b[name + ".skip"]) if name + ".skip" in b else x
        return ops.add(skip, h)

    def cross_attention(
        self,
        x: Tensor,
        idx: int,
        e_t: Tensor,
        e_s: Tensor | None,
        e_c: Tensor | None,
        policy: InjectionPolicy | None,
    ) -> Tensor:
        """One cross-attention site on ``x: (B, H, W, C)`` returning the updated hidden state."""
        b = self.base
        pre = f"attn.{idx}"
        B, H, W, C = x.shape
        xs = ops.reshape(x, (B, H * W, C))
        q = ops.matmul(ops.layer_norm(xs, b[pre + ".ln.g"], b[pre + ".ln.b"]), b[pre + ".q"])
        o = self._site_output(q, idx, e_t, e_s, e_c, policy)
        return ops.add(x, ops.reshape(ops.matmul(o, b[pre + ".o"]), (B, H, W, C)))

    def _site_output(self, q: Tensor, idx: int, e_t: Tensor, e_s, e_c, policy) -> Tensor:
        """Text attention plus the policy-weighted style and color attentions."""
        b, s = self.base, self.streams.params
        pre = f"attn.{idx}"
        terms = [(ops.matmul(e_t, b[pre + ".k_t"]), ops.matmul(e_t, b[pre + ".v_t"]), 1.0)]
        if policy is not None:
            lam_s = float(policy.lambda_s[idx]) if policy.style_active[idx] else 0.0
            lam_c = float(policy.lambda_c[idx])
            if e_s is not None and lam_s != 0.0:
                terms.append((ops.matmul(e_s, s[f"{idx}.k_s"]), ops.matmul(e_s, s[f"{idx}.v_s"]), lam_s))
            if e_c is not None and lam_c != 0.0:
                terms.append((ops.matmul(e_c, s[f"{idx}.k_c"]), ops.matmul(e_c, s[f"{idx}.v_c"]), lam_c))
        return ops.multi_attention(q, terms)

    def forward(
        self,
        latent,
        t,
        e_t: TokenSet,
        e_s: TokenSet | None = None,
        e_c: TokenSet | None = None,
        policy: InjectionPolicy | None = None,
        cond: Sequence[Tensor] | None = None,
    ) -> Tensor:
        latent = latent if isinstance(latent, Tensor) else Tensor(latent)
        single = latent.ndim == 3
        if single:
            latent = ops.reshape(latent, (1,) + latent.shape)
        if latent.ndim != 4 or latent.shape[1] != self.config.latent_channels:
            raise ShapeError(f"unet_forward: expected ({self.config.latent_channels}, H, W) latents, got {latent.shape}")
        B, _, H, W = latent.shape
        if H % 4 or W % 4:
            raise ShapeError(f"unet_forward: latent spatial dims {H}x{W} must be divisible by 4")
        if policy is not None and len(policy) != self.registry.total:
            raise LayoutError(f"policy covers {len(policy)} sites, model has {self.registry.total}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        b = self.base
        e_t_b = _batch_tokens(e_t, B, "text")
        e_s_b = _batch_tokens(e_s, B, "style") if e_s is not None else None
        e_c_b = _batch_tokens(e_c, B, "color") if e_c is not None else None
        if cond is not None:
            cond = list(cond)
            if len(cond) != 3:
                raise ShapeError(f"expected 3 conditioning residuals, got {len(cond)}")

        temb = Tensor(timestep_embedding(t, self.config.t_dim))
        temb = ops.gelu(ops.linear(temb, b["time.w1"], b["time.b1"]))
        temb = ops.linear(temb, b["time.w2"], b["time.b2"])

        x = ops.transpose(latent, (0, 2, 3, 1))
        h = ops.conv2d(x, b["conv_in"], b["conv_in.b"])
        skips: list[Tensor] = []
        for step in self._plan:
            kind = step[0]
            if kind == "control":
                if cond is not None:
                    r = cond[step[1]]
                    if r.shape[1:] != h.shape[1:]:
                        raise ShapeError(f"conditioning residual {step[1]} has shape {r.shape}, expected {h.shape}")
                    h = ops.add(h, r)
            elif kind == "push":
                skips.append(h)
            elif kind == "res":
                h = self._res_fwd(step[1], h, temb)
            elif kind == "pop_res":
                h = self._res_fwd(step[1], ops.concat([h, skips.pop()], axis=3), temb)
            elif kind == "attn":
                for idx in step[1]:
                    h = self.cross_attention(h, idx, e_t_b, e_s_b, e_c_b, policy)
            elif kind == "down":
                h = ops.conv2d(h, b[step[1]], b[step[1] + ".b"], stride=2)
            elif kind == "up":
                h = ops.upsample2x(h)
        h = ops.gelu(ops.layer_norm(h, b["out.ln.g"], b["out.ln.b"]))
        out = ops.transpose(ops.conv2d(h, b["conv_out"], b["conv_out.b"]), (0, 3, 1, 2))
        if single:
            out = ops.reshape(out, out.shape[1:])
        return out

    __call__ = forward


def unet_forward(model: ToyUNet, latent, t, e_t, e_s=None, e_c=None, policy=None, cond=None) -> Tensor:
    return model.forward(latent, t, e_t, e_s, e_c, policy, cond)


def cross_attention_block(model: ToyUNet, x, e_t, e_s, e_c, policy: InjectionPolicy, idx: int) -> Tensor:
    """Two-stream site output (before the residual add and output projection) for ``x: (B, N, C)``."""
    if not 0 <= idx < model.registry.total:
        raise LayoutError(f"block index {idx} outside registry")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[-1] != model.site_widths[idx]:
        raise ShapeError(f"site {idx} expects (B, N, {model.site_widths[idx]}) queries, got {x.shape}")
    B = x.shape[0]
    b = model.base
    pre = f"attn.{idx}"
    q = ops.matmul(ops.layer_norm(x, b[pre + ".ln.g"], b[pre + ".ln.b"]), b[pre + ".q"])
    e_t_b = _batch_tokens(e_t, B, "text")
    e_s_b = _batch_tokens(e_s, B, "style") if e_s is not None else None
    e_c_b = _batch_tokens(e_c, B, "color") if e_c is not None else None
    return model._site_output(q, idx, e_t_b, e_s_b, e_c_b, policy)


def _rows(t: Tensor, start: int, stop: int) -> Tensor:
    n = t.shape[0]
    data = t.data[start:stop]

    def backward(g):
        full = np.zeros((n,) + g.shape[1:])
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(data, (t,), backward)


def _batch_tokens(tokens: TokenSet | Tensor, batch: int, what: str) -> Tensor:
    t = tokens.tokens if isinstance(tokens, TokenSet) else tokens
    if t.ndim == 2:
        t = ops.add(Tensor(np.zeros((batch,) + t.shape)), t)
    elif t.shape[0] != batch:
        raise ShapeError(f"{what} tokens have batch {t.shape[0]}, latents have {batch}")
    return t


# ---------------------------------------------------------------------------
# Structure conditioning


class ControlEncoder:
    """Conv encoder over an edge map emitting one residual per encoder resolution.

    The last projection of every branch starts at zero, so an untrained encoder
    leaves the base untouched.
    """

    def __init__(self, widths: tuple[int, int, int] = (32, 32, 64), hidden: int = 16, seed: int = 3):
        init = _Init(seed)
        w0, w1, w2 = widths
        self.widths = widths
        self.params = {
            "c0": parameter(init.normal((3, 3, 1, hidden), 9, math.sqrt(2.0))),
            "c0.b": parameter(np.zeros(hidden)),
            "c1": parameter(init.normal((3, 3, hidden, w0), 9 * hidden, math.sqrt(2.0))),
            "c1.b": parameter(np.zeros(w0)),
            "z0": parameter(np.zeros((w0, w0))),
            "c2": parameter(init.normal((3, 3, w0, w1), 9 * w0, math.sqrt(2.0))),
            "c2.b": parameter(np.zeros(w1)),
            "z1": parameter(np.zeros((w1, w1))),
            "c3": parameter(init.normal((3, 3, w1, w2), 9 * w1, math.sqrt(2.0))),
            "c3.b": parameter(np.zeros(w2)),
            "z2": parameter(np.zeros((w2, w2))),
        }

    def freeze(self, frozen: bool = True) -> None:
        for t in self.params.values():
            t.requires_grad = not frozen


def condition_residuals(
    edges: EdgeMap | Sequence[EdgeMap] | np.ndarray,
    weights: ControlEncoder,
    controlnet_weight: float = 1.0,
    latent_hw: tuple[int, int] | None = None,
) -> list[Tensor]:
    """Residuals at latent, latent/2 and latent/4 resolution, scaled by ``controlnet_weight``."""
    if isinstance(edges, EdgeMap):
        arr = edges.data[None].astype(np.float64)
    elif isinstance(edges, np.ndarray):
        arr = np.asarray(edges, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    else:
        arr = np.stack([e.data for e in edges]).astype(np.float64)
    _, H, W = arr.shape
    if H % 8 or W % 8:
        raise ShapeError(f"edge map {H}x{W} must be divisible by 8")
    if latent_hw is not None and (H, W) != (2 * latent_hw[0], 2 * latent_hw[1]):
        raise ShapeError(f"edge map {H}x{W} does not match latent {latent_hw} (expected twice the latent size)")
    p = weights.params
    x = Tensor(arr[..., None])
    h = ops.gelu(ops.conv2d(x, p["c0"], p["c0.b"], stride=2))
    h = ops.gelu(ops.conv2d(h, p["c1"], p["c1.b"]))
    r0 = ops.matmul(h, p["z0"])
    h = ops.gelu(ops.conv2d(h, p["c2"], p["c2.b"], stride=2))
    r1 = ops.matmul(h, p["z1"])
    h = ops.gelu(ops.conv2d(h, p["c3"], p["c3.b"], stride=2))
    r2 = ops.matmul(h, p["z2"])
    w = float(controlnet_weight)
    return [ops.scale(r, w) for r in (r0, r1, r2)]


# ---------------------------------------------------------------------------
# Latent encode / decode (fixed, no learned autoencoder)


def encode_image(img: ImageBuffer) -> np.ndarray:
    """sRGB image ``(H, W, 3)`` to a ``(3, H/2, W/2)`` latent in [-1, 1] by 2x2 average pooling."""
    if img.space is not ColorSpace.SRGB:
        raise ShapeError(f"encode_image expects an srgb image, got {img.space.value}")
    h, w = img.height, img.width
    if h % 8 or w % 8:
        raise ShapeError(f"image {h}x{w} must be divisible by 8")
    x = img.data.reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
    return np.ascontiguousarray((x * 2.0 - 1.0).transpose(2, 0, 1))


def decode_latent(latent: np.ndarray | Tensor) -> ImageBuffer:
    """Nearest-neighbour 2x upsampling back to an sRGB image, clamped to [0, 1]."""
    z = latent.data if isinstance(latent, Tensor) else np.asarray(latent, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != LATENT_CHANNELS:
        raise ShapeError(f"decode_latent expects ({LATENT_CHANNELS}, H, W), got {z.shape}")
    rgb = np.clip((z.transpose(1, 2, 0) + 1.0) * 0.5, 0.0, 1.0)
    return ImageBuffer(rgb.repeat(2, axis=0).repeat(2, axis=1), ColorSpace.SRGB)


def save_policy(path: str | Path, policy: InjectionPolicy) -> None:
    Path(path).write_text(policy.to_json() + "\n", encoding="utf-8")


def load_policy(path: str | Path) -> InjectionPolicy:
    return InjectionPolicy.from_json(Path(path).read_text(encoding="utf-8"))
