"""The three inference workflows and their evaluation hooks.

* style + color + prompt: style tokens from the greyscale style image, color
  tokens from the color image's histogram, caption from the prompt key.
* style + color + content: the same streams plus structure residuals from the
  content image's edge map.
* characteristics-preserved: the content image is also the color reference,
  and sampling starts from a partially noised content latent.

Every workflow finishes with global color calibration against its color
reference.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibrate import global_color_calibration
from .colorlab import ColorHistogram, ImageBuffer, color_distance, extract_histogram, greyscale
from .denoiser import CDST_LOW_WEIGHT, InjectionPolicy, cdst_inference_policy, condition_residuals, decode_latent, encode_image
from .edges import canny
from .embed import compress_style, embed_color, toy_features
from .sampler import (
    DiffusionSchedule,
    SampleRequest,
    content_prior_timestep,
    make_schedule,
    sample,
    timestep_sequence,
)
from .training import ModelBundle, TextureFamily
from .tensorcore import checkpoint, no_grad

PRESET_NAMES = ("paper-scp", "paper-scc", "paper-cp")
WORKFLOWS = {"scp": "paper-scp", "scc": "paper-scc", "cp": "paper-cp"}


class WorkflowError(ValueError):
    pass


@dataclass(frozen=True)
class WorkflowPreset:
    style_weight: float = 0.9  # high-range style weight; the low range stays at style_weight_low
    style_weight_low: float = CDST_LOW_WEIGHT
    color_weight: float = 1.0
    controlnet_weight: float = 1.0
    content_prior_strength: float = 0.6
    cfg_scale: float = 4.0
    steps: int = 30
    gcc_alpha: float = 0.8
    uncond_drops_all: bool = False

    def __post_init__(self):
        for name in ("style_weight", "style_weight_low", "color_weight", "controlnet_weight"):
            if not 0.0 <= getattr(self, name) <= 2.0:
                raise WorkflowError(f"{name} must lie in [0, 2], got {getattr(self, name)}")
        if not 0.0 <= self.content_prior_strength <= 1.0:
            raise WorkflowError("content_prior_strength must lie in [0, 1]")
        if not 0.0 <= self.gcc_alpha <= 1.0:
            raise WorkflowError("gcc_alpha must lie in [0, 1]")
        if self.cfg_scale < 0 or not 1 <= self.steps <= 1000:
            raise WorkflowError("cfg_scale must be non-negative and steps in [1, 1000]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowPreset":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise WorkflowError(f"unknown preset keys {sorted(unknown)}")
        return cls(**d)

    def policy(self, registry) -> InjectionPolicy:
        return cdst_inference_policy(registry, self.style_weight, self.style_weight_low, self.color_weight)


def load_preset(name_or_path: str | Path) -> WorkflowPreset:
    """A shipped preset by name (``paper-scp`` ...) or a JSON file path."""
    text: str
    if str(name_or_path) in PRESET_NAMES:
        text = resources.files("cdst").joinpath("presets", f"{name_or_path}.json").read_text(encoding="utf-8")
    else:
        try:
            text = Path(name_or_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise WorkflowError(f"unknown preset {name_or_path!r}: {exc}") from None
    try:
        return WorkflowPreset.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise WorkflowError(f"preset {name_or_path} is not valid JSON: {exc}") from None


def prompt_family(key) -> int | None:
    """Caption key: a texture family name or id, or None for the empty caption."""
    if key is None:
        return None
    if isinstance(key, (int, np.integer)):
        return int(TextureFamily(int(key)))
    try:
        return int(TextureFamily[str(key).upper()])
    except KeyError:
        raise WorkflowError(f"unknown prompt {key!r}; expected one of {[f.name.lower() for f in TextureFamily]}") from None


class Pipeline:
    """A trained model bundle with its diffusion schedule."""

    def __init__(self, bundle: ModelBundle, sched: DiffusionSchedule | None = None):
        self.bundle = bundle
        self.sched = sched or make_schedule()

    @classmethod
    def load(cls, path: str | Path) -> "Pipeline":
        if not Path(path).is_file():
            raise WorkflowError(f"missing checkpoint: {path}")
        try:
            return cls(ModelBundle.load(path))
        except checkpoint.CheckpointError as exc:
            raise WorkflowError(f"bad checkpoint {path}: {exc}") from None

    # -- stream inputs ------------------------------------------------------------
    def style_tokens(self, style_img: ImageBuffer):
        with no_grad():
            return compress_style(toy_features(greyscale(style_img)), self.bundle.style)

    def color_tokens(self, color: ImageBuffer | ColorHistogram):
        hist = color if isinstance(color, ColorHistogram) else extract_histogram(color)
        with no_grad():
            return embed_color(hist, self.bundle.color)

    def residuals(self, content_img: ImageBuffer, weight: float):
        with no_grad():
            return condition_residuals(canny(content_img), self.bundle.control, weight)

    # -- core -----------------------------------------------------------------------
    def run(
        self,
        style_img: ImageBuffer,
        color_img: ImageBuffer,
        preset: WorkflowPreset,
        seed: int,
        prompt=None,
        content_img: ImageBuffer | None = None,
        content_prior: bool = False,
        size: int = 64,
    ) -> ImageBuffer:
        unet = self.bundle.unet
        cond = self.residuals(content_img, preset.controlnet_weight) if content_img is not None else None
        prior = None
        if content_prior:
            if content_img is None:
                raise WorkflowError("a content prior needs a content image")
            latent = encode_image(content_img)
            t_p = content_prior_timestep(preset.content_prior_strength, self.sched.T)
            if timestep_sequence(self.sched.T, preset.steps, t_p)[0] == 0:
                # No denoising step runs: the result is the round-tripped content.
                return decode_latent(latent)
            prior = (latent, preset.content_prior_strength)
        h, w = (content_img.height, content_img.width) if content_img is not None else (size, size)
        if h % 8 or w % 8:
            raise WorkflowError(f"output size {h}x{w} must be divisible by 8")
        req = SampleRequest(
            e_t=unet.text_tokens([prompt_family(prompt)]),
            e_s=self.style_tokens(style_img),
            e_c=self.color_tokens(color_img),
            policy=preset.policy(unet.registry),
            steps=preset.steps,
            cfg_scale=preset.cfg_scale,
            seed=seed,
            content_prior=prior,
            cond=cond,
            latent_shape=(3, h // 2, w // 2),
            uncond_drops_all=preset.uncond_drops_all,
        )
        out = decode_latent(sample(req, unet, self.sched))
        return global_color_calibration(out, color_img, preset.gcc_alpha)


def style_color_prompt(
    pipe: Pipeline, style_img: ImageBuffer, color_img: ImageBuffer, prompt_key, preset: WorkflowPreset, seed: int
) -> ImageBuffer:
    return pipe.run(style_img, color_img, preset, seed, prompt=prompt_key)


def style_color_content(
    pipe: Pipeline,
    style_img: ImageBuffer,
    color_img: ImageBuffer,
    content_img: ImageBuffer,
    preset: WorkflowPreset,
    seed: int,
    prompt_key=None,
) -> ImageBuffer:
    return pipe.run(style_img, color_img, preset, seed, prompt=prompt_key, content_img=content_img)


def characteristics_preserved(
    pipe: Pipeline,
    style_img: ImageBuffer,
    content_img: ImageBuffer,
    preset: WorkflowPreset,
    seed: int,
    prompt_key=None,
    color_weight: float | None = None,
) -> ImageBuffer:
    """Content image doubles as the color reference; sampling starts from its noised latent."""
    if color_weight is not None:
        preset = replace(preset, color_weight=color_weight)
    return pipe.run(style_img, content_img, preset, seed, prompt=prompt_key, content_img=content_img, content_prior=True)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_pair(out: ImageBuffer, color_ref: ImageBuffer, luma_ref: ImageBuffer | None = None) -> dict:
    """Histogram distance to ``color_ref`` and greyscale MSE to ``luma_ref`` (default ``color_ref``)."""
    luma_ref = color_ref if luma_ref is None else luma_ref
    if (out.height, out.width) != (luma_ref.height, luma_ref.width):
        raise WorkflowError(f"luma reference is {luma_ref.height}x{luma_ref.width}, output {out.height}x{out.width}")
    diff = greyscale(out).data - greyscale(luma_ref).data
    return {
        "color_distance": color_distance(extract_histogram(out), extract_histogram(color_ref)),
        "luma_mse": float(np.mean(diff * diff)),
    }


def metrics_record(run_id: str, metrics: dict, preset: WorkflowPreset, seed: int) -> dict:
    return {
        "id": run_id,
        "color_distance": metrics["color_distance"],
        "luma_mse": metrics["luma_mse"],
        "preset": preset.to_dict(),
        "seed": int(seed),
    }


def write_jsonl(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
