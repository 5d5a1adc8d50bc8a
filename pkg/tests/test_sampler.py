import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdst.denoiser import ToyUNet, cdst_inference_policy
from cdst.embed import TokenKind, TokenSet
from cdst.sampler import (
    DiffusionSchedule,
    SampleRequest,
    SampleTrace,
    ScheduleError,
    add_noise,
    cfg_combine,
    content_prior_timestep,
    ddim_step,
    make_content_prior,
    make_schedule,
    sample,
    timestep_sequence,
)
from cdst.tensorcore import ShapeError, Tensor


@pytest.fixture(scope="module")
def sched():
    return make_schedule()


def test_schedule_endpoints(sched):
    ab = sched.alpha_bar
    assert ab[0] == 1.0 and len(ab) == 1001
    assert np.all(np.diff(ab) < 0)
    prod = 1.0
    for i in range(1000):
        beta = (math.sqrt(0.00085) + (math.sqrt(0.012) - math.sqrt(0.00085)) * i / 999) ** 2
        prod *= 1.0 - beta
    assert abs(ab[1000] - prod) < 1e-12


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.2, 0.1), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


def test_content_prior_timestep_rounding():
    assert content_prior_timestep(0.6, 1000) == 400
    assert content_prior_timestep(1.0, 1000) == 0
    assert content_prior_timestep(0.0, 1000) == 1000
    assert content_prior_timestep(0.5, 5) == 3  # 2.5 rounds half up
    with pytest.raises(ScheduleError):
        content_prior_timestep(1.2, 1000)


def test_content_prior_at_full_strength_is_identity(sched):
    x = np.random.default_rng(0).standard_normal((3, 4, 4))
    out, t = make_content_prior(x, 1.0, sched, seed=3)
    assert t == 0 and np.array_equal(out, x)


def test_content_prior_variance_at_zero_strength(sched):
    x = np.random.default_rng(1).standard_normal((3, 8, 8)) * 2.0
    draws = np.stack([make_content_prior(x, 0.0, sched, seed=s)[0] for s in range(1000)])
    ab = sched.alpha_bar[-1]
    # Per-element variance over trials, compared with the prediction averaged over
    # elements: the signal term is deterministic per element, so its spread enters
    # through Var(X_C) across elements.
    total = draws.reshape(1000, -1)
    pred = ab * x.var() + (1 - ab)
    got = total.var()
    assert abs(got - pred) / pred < 0.05
    assert abs(np.mean(draws.var(axis=0)) - (1 - ab)) / (1 - ab) < 0.05


def test_ddim_zero_eps_closed_form(sched):
    x = np.random.default_rng(2).standard_normal((3, 4, 4))
    out = ddim_step(x, np.zeros_like(x), 700, 400, sched)
    ab = sched.alpha_bar
    assert np.array_equal(out, math.sqrt(ab[400]) * (x / math.sqrt(ab[700])))
    np.testing.assert_allclose(out, math.sqrt(ab[400] / ab[700]) * x, rtol=1e-15)


def test_ddim_exact_eps_identity(sched):
    rng = np.random.default_rng(3)
    x0, eps = rng.standard_normal((2, 3, 4, 4))
    xt = add_noise(x0, eps, 900, sched)
    out = ddim_step(xt, eps, 900, 500, sched)
    np.testing.assert_allclose(out, add_noise(x0, eps, 500, sched), atol=1e-12)


def test_ddim_exact_eps_reconstructs_over_full_grid(sched):
    rng = np.random.default_rng(4)
    x0, eps = rng.standard_normal((2, 3, 8, 8))
    grid = timestep_sequence(1000, 30)
    x = add_noise(x0, eps, grid[0], sched)
    for t, tp in zip(grid[:-1], grid[1:]):
        x = ddim_step(x, eps, t, tp, sched)
    assert np.max(np.abs(x - x0)) < 1e-8


def test_ddim_flat_schedule_is_identity():
    flat = DiffusionSchedule(2, np.array([1.0, 0.5, 0.5]))
    x = np.random.default_rng(5).standard_normal((3, 2, 2))
    eps = np.random.default_rng(6).standard_normal((3, 2, 2))
    np.testing.assert_allclose(ddim_step(x, eps, 2, 1, flat), x, atol=1e-15)


def test_ddim_errors(sched):
    x = np.zeros((3, 4, 4))
    with pytest.raises(ShapeError):
        ddim_step(x, np.zeros((3, 4, 5)), 10, 5, sched)
    with pytest.raises(ScheduleError):
        ddim_step(x, x, 5, 5, sched)
    with pytest.raises(ScheduleError):
        ddim_step(x, x, 1001, 5, sched)


def test_cfg_combine():
    rng = np.random.default_rng(7)
    c, u = rng.standard_normal((2, 3, 4))
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    np.testing.assert_allclose(cfg_combine(c, u, 4.0), u + 4 * (c - u))
    with pytest.raises(ShapeError):
        cfg_combine(c, u[:2], 2.0)


def test_timestep_sequence():
    grid = timestep_sequence(1000, 30)
    assert len(grid) == 31 and grid[0] == 1000 and grid[-1] == 0
    cut = timestep_sequence(1000, 30, start=400)
    assert cut[0] == max(t for t in grid if t <= 400) == 400
    assert timestep_sequence(1000, 30, start=410)[0] == 400
    assert timestep_sequence(1000, 30, start=0) == [0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(0, 1))
def test_timestep_sequence_properties(steps, lam):
    grid = timestep_sequence(1000, steps, start=content_prior_timestep(lam, 1000))
    assert grid[-1] == 0
    assert all(a > b for a, b in zip(grid, grid[1:]))
    assert grid[0] <= content_prior_timestep(lam, 1000)


@pytest.fixture(scope="module")
def request_parts():
    unet = ToyUNet(seed=11)
    rng = np.random.default_rng(0)
    e_s = TokenSet(Tensor(rng.standard_normal((7, 64))), TokenKind.STYLE)
    e_c = TokenSet(Tensor(rng.standard_normal((4, 64))), TokenKind.COLOR)
    return unet, e_s, e_c


def _req(unet, e_s, e_c, **kw):
    base = dict(
        e_t=unet.text_tokens([0]),
        e_s=e_s,
        e_c=e_c,
        policy=cdst_inference_policy(unet.registry),
        steps=4,
        seed=3,
        latent_shape=(3, 8, 8),
    )
    base.update(kw)
    return SampleRequest(**base)


def test_sample_counts_steps_and_is_deterministic(request_parts, sched):
    unet, e_s, e_c = request_parts
    calls = []

    def counting(*args):
        calls.append(args[2])
        return np.zeros_like(args[0])

    trace = SampleTrace()
    sample(_req(unet, e_s, e_c, steps=30), unet, sched, trace, step_fn=counting)
    assert len(calls) == 30 and trace.ddim_calls == 30
    a = sample(_req(unet, e_s, e_c), unet, sched)
    b = sample(_req(unet, e_s, e_c), unet, sched)
    assert np.array_equal(a, b)


def test_sample_content_prior_start(request_parts, sched):
    unet, e_s, e_c = request_parts
    latent = np.random.default_rng(1).uniform(-1, 1, (3, 8, 8))
    trace = SampleTrace()
    sample(_req(unet, e_s, e_c, steps=30, content_prior=(latent, 0.6)), unet, sched, trace, step_fn=lambda x, *a: x)
    assert trace.timesteps[0] == 400 and trace.ddim_calls == 12
    out = sample(_req(unet, e_s, e_c, content_prior=(latent, 1.0)), unet, sched)
    assert np.array_equal(out, latent)


def test_sample_cfg_branches(request_parts, sched):
    unet, e_s, e_c = request_parts
    # With scale 1 only the conditional branch matters.
    a = sample(_req(unet, e_s, e_c, cfg_scale=1.0), unet, sched)
    b = sample(_req(unet, e_s, e_c, cfg_scale=1.0, e_t_null=unet.text_tokens([3])), unet, sched)
    assert np.array_equal(a, b)
    c = sample(_req(unet, e_s, e_c, cfg_scale=4.0), unet, sched)
    d = sample(_req(unet, e_s, e_c, cfg_scale=4.0, uncond_drops_all=True), unet, sched)
    assert not np.array_equal(c, d)


def test_request_validates_prior_strength(request_parts):
    unet, e_s, e_c = request_parts
    with pytest.raises(ScheduleError):
        _req(unet, e_s, e_c, content_prior=(np.zeros((3, 8, 8)), 1.5))


def test_batched_guidance_matches_separate_passes(request_parts):
    from cdst.sampler import _predict

    unet, e_s, e_c = request_parts
    req = _req(unet, e_s, e_c, cfg_scale=4.0)
    x = np.random.default_rng(2).standard_normal((3, 8, 8))
    cond = unet(x, 600, req.e_t, e_s, e_c, req.policy).data
    uncond = unet(x, 600, unet.text_tokens([None]), e_s, e_c, req.policy).data
    np.testing.assert_allclose(_predict(unet, req, x, 600), uncond + 4.0 * (cond - uncond), atol=1e-12)
