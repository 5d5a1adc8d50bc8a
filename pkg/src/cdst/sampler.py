"""Deterministic DDIM sampling with classifier-free guidance and content-prior starts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .denoiser import InjectionPolicy, ToyUNet
from .embed import TokenSet
from .tensorcore import ShapeError, Tensor, no_grad, ops

DEFAULT_T = 1000
BETA_START = 0.00085
BETA_END = 0.012
DEFAULT_STEPS = 30
DEFAULT_CFG = 4.0


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] == 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ScheduleError(f"alpha_bar needs {self.T + 1} entries, got {ab.shape}")
        if ab[0] != 1.0 or np.any(ab <= 0) or np.any(ab > 1):
            raise ScheduleError("alpha_bar must start at 1 and stay in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ScheduleError("alpha_bar must be non-increasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return t


def make_schedule(T: int = DEFAULT_T, beta_start: float = BETA_START, beta_end: float = BETA_END) -> DiffusionSchedule:
    """Scaled-linear schedule: betas linear in sqrt space, ``alpha_bar_t = prod_{i<=t} (1 - beta_i)``."""
    if T < 1:
        raise ScheduleError(f"T must be at least 1, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T) ** 2
    ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(T, ab)


def content_prior_timestep(lambda_p: float, T: int) -> int:
    """``t_P = (1 - lambda_P) T`` rounded half-up."""
    if not 0.0 <= lambda_p <= 1.0:
        raise ScheduleError(f"content prior strength must lie in [0, 1], got {lambda_p}")
    return int(math.floor((1.0 - lambda_p) * T + 0.5))


def add_noise(x0: np.ndarray, eps: np.ndarray, t: int, sched: DiffusionSchedule) -> np.ndarray:
    ab = sched.alpha_bar[sched.check(t)]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def make_content_prior(
    x_c: np.ndarray | Tensor, lambda_p: float, sched: DiffusionSchedule, seed: int
) -> tuple[np.ndarray, int]:
    """Noise the content latent to ``t_P``. Returns ``(x_tP, t_P)``."""
    x = x_c.data if isinstance(x_c, Tensor) else np.asarray(x_c, dtype=np.float64)
    t_p = content_prior_timestep(lambda_p, sched.T)
    eps = np.random.default_rng(seed).standard_normal(x.shape)
    if t_p == 0:
        return x.copy(), 0
    return add_noise(x, eps, t_p, sched), t_p


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: DiffusionSchedule) -> np.ndarray:
    """One deterministic DDIM update from ``t`` to ``t_prev``."""
    x_t = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"ddim_step: x_t {x_t.shape} and eps {eps_hat.shape} differ")
    t, t_prev = sched.check(t), sched.check(t_prev)
    if t_prev >= t:
        raise ScheduleError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    a_t, a_p = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x0_hat = (x_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_p) * x0_hat + math.sqrt(1.0 - a_p) * eps_hat


def cfg_combine(eps_cond, eps_uncond, scale: float) -> np.ndarray:
    c = eps_cond.data if isinstance(eps_cond, Tensor) else np.asarray(eps_cond, dtype=np.float64)
    u = eps_uncond.data if isinstance(eps_uncond, Tensor) else np.asarray(eps_uncond, dtype=np.float64)
    if c.shape != u.shape:
        raise ShapeError(f"cfg_combine: shapes differ, {c.shape} vs {u.shape}")
    if scale == 1.0:
        return c.copy()
    if scale == 0.0:
        return u.copy()
    return u + scale * (c - u)


def timestep_sequence(T: int, steps: int, start: int | None = None) -> list[int]:
    """Uniform descending grid ``T = tau_steps > ... > tau_0 = 0``, cut to begin at ``start``.

    With ``start`` the grid keeps only points ``<= start``; the first kept point is
    the largest scheduled step not exceeding it.
    """
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must lie in [1, {T}], got {steps}")
    grid = [int(v) for v in np.round(np.linspace(T, 0, steps + 1))]
    if start is not None:
        grid = [t for t in grid if t <= start]
    return grid


@dataclass
class SampleRequest:
    e_t: TokenSet
    e_s: TokenSet | None = None
    e_c: TokenSet | None = None
    policy: InjectionPolicy | None = None
    steps: int = DEFAULT_STEPS
    cfg_scale: float = DEFAULT_CFG
    seed: int = 0
    content_prior: tuple[np.ndarray, float] | None = None  # (latent, lambda_P)
    cond: Sequence[Tensor] | None = None
    latent_shape: tuple[int, int, int] = (3, 32, 32)
    uncond_drops_all: bool = False
    e_t_null: TokenSet | None = None

    def __post_init__(self):
        if self.content_prior is not None:
            lam = float(self.content_prior[1])
            if not 0.0 <= lam <= 1.0:
                raise ScheduleError(f"content prior strength must lie in [0, 1], got {lam}")


@dataclass
class SampleTrace:
    timesteps: list[int] = field(default_factory=list)
    ddim_calls: int = 0


def _predict(model: ToyUNet, req: SampleRequest, x: np.ndarray, t: int) -> np.ndarray:
    null = req.e_t_null if req.e_t_null is not None else model.text_tokens([None])
    if req.cfg_scale == 1.0:
        return model(x[None], t, req.e_t, req.e_s, req.e_c, req.policy, req.cond).data[0]
    # Conditional and unconditional branches share one batched forward when
    # they use the same streams; the unconditional branch drops the text stream.
    if req.uncond_drops_all:
        cond = model(x[None], t, req.e_t, req.e_s, req.e_c, req.policy, req.cond).data[0]
        uncond = model(x[None], t, null, None, None, req.policy, req.cond).data[0]
    else:
        e_t = ops.concat([req.e_t.batched(), null.batched()], axis=0)
        e_s = _pair(req.e_s)
        e_c = _pair(req.e_c)
        res = [ops.concat([r, r], axis=0) for r in req.cond] if req.cond is not None else None
        out = model(np.stack([x, x]), t, TokenSet(e_t, req.e_t.kind), e_s, e_c, req.policy, res).data
        cond, uncond = out[0], out[1]
    return cfg_combine(cond, uncond, req.cfg_scale)


def _pair(tokens: TokenSet | None) -> TokenSet | None:
    if tokens is None:
        return None
    b = tokens.batched()
    if b.shape[0] != 1:
        raise ShapeError("sampling expects a single set of reference tokens")
    return TokenSet(ops.concat([b, b], axis=0), tokens.kind)


def sample(
    req: SampleRequest,
    model: ToyUNet,
    sched: DiffusionSchedule,
    trace: SampleTrace | None = None,
    step_fn: Callable[..., np.ndarray] = ddim_step,
) -> np.ndarray:
    """Run the reverse process; returns the final latent ``(C, H, W)``."""
    if req.content_prior is not None:
        latent, lam = req.content_prior
        x_c = np.asarray(latent, dtype=np.float64)
        grid = timestep_sequence(sched.T, req.steps, start=content_prior_timestep(lam, sched.T))
        # Noise to the snapped start step so the latent matches the first update.
        eps = np.random.default_rng(req.seed).standard_normal(x_c.shape)
        x = x_c.copy() if grid[0] == 0 else add_noise(x_c, eps, grid[0], sched)
    else:
        x = np.random.default_rng(req.seed).standard_normal(req.latent_shape)
        grid = timestep_sequence(sched.T, req.steps)
    if trace is not None:
        trace.timesteps = list(grid)
    with no_grad():
        for t, t_prev in zip(grid[:-1], grid[1:]):
            eps = _predict(model, req, x, t)
            x = step_fn(x, eps, t, t_prev, sched)
            if trace is not None:
                trace.ddim_calls += 1
    return x
