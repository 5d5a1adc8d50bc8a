import numpy as np
import pytest

from cdst.colorlab import ImageBuffer
from cdst.denoiser import (
    ControlEncoder,
    InjectionPolicy,
    LayoutError,
    ToyUNet,
    build_sdxl_layout,
    cdst_inference_policy,
    condition_residuals,
    cross_attention_block,
    decode_latent,
    encode_image,
    load_policy,
    save_policy,
    streams_off_policy,
    training_policy,
)
from cdst.embed import TokenKind, TokenSet
from cdst.tensorcore import ShapeError, Tensor, ops
from gradcheck import numeric_grad, relative_error


@pytest.fixture(scope="module")
def unet():
    return ToyUNet()


def _tokens(seed, n, kind, d=64):
    return TokenSet(Tensor(np.random.default_rng(seed).standard_normal((n, d))), kind)


@pytest.fixture(scope="module")
def streams(unet):
    return unet.text_tokens([1]), _tokens(1, 7, TokenKind.STYLE), _tokens(2, 4, TokenKind.COLOR)


def test_layout_counts():
    reg = build_sdxl_layout()
    assert reg.total == 70
    assert reg.encoder_range == (0, 24) and reg.middle_range == (24, 34) and reg.decoder_range == (34, 70)
    assert [reg.stage_of(i) for i in (0, 23, 24, 33, 34, 69)] == ["encoder"] * 2 + ["middle"] * 2 + ["decoder"] * 2
    assert [g[2] for g in reg.groups] == [2, 2, 10, 10, 10, 10, 10, 10, 2, 2, 2]
    with pytest.raises(LayoutError):
        reg.stage_of(70)


def test_inference_policy():
    pol = cdst_inference_policy(build_sdxl_layout())
    assert pol.style_active.sum() == 40
    assert pol.lambda_s[50] == 0.9 and pol.lambda_s[5] == 0.2
    assert np.all(pol.lambda_s[14:44] == 0) and not pol.style_active[14:44].any()
    assert np.all(pol.lambda_c == 1.0)


def test_training_policy():
    pol = training_policy(build_sdxl_layout())
    assert len(pol) == 70 and pol.style_active.all()
    assert np.all(pol.lambda_s == 1.0) and np.all(pol.lambda_c == 1.0)


def test_small_registry_rejected():
    from cdst.denoiser import BlockRegistry

    with pytest.raises(LayoutError):
        cdst_inference_policy(BlockRegistry(10, (0, 4), (4, 6), (6, 10)))


def test_policy_invariant_and_json(tmp_path):
    with pytest.raises(LayoutError):
        InjectionPolicy([0.5, 0.0], [1.0, 1.0], [False, True])
    pol = cdst_inference_policy(build_sdxl_layout())
    save_policy(tmp_path / "p.json", pol)
    back = load_policy(tmp_path / "p.json")
    assert np.array_equal(back.lambda_s, pol.lambda_s) and np.array_equal(back.style_active, pol.style_active)


def _site_input(unet, idx, seed=5, n=6):
    return Tensor(np.random.default_rng(seed).standard_normal((1, n, unet.site_widths[idx])))


def _policy_with(lam_s, lam_c, idx, n=70):
    s, c, a = np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool)
    s[idx], c[idx], a[idx] = lam_s, lam_c, lam_s != 0
    return InjectionPolicy(s, c, a)


def test_zero_weights_give_text_only_attention(unet, streams):
    e_t, e_s, e_c = streams
    x = _site_input(unet, 3)
    with_streams = cross_attention_block(unet, x, e_t, e_s, e_c, _policy_with(0.0, 0.0, 3), 3).data
    text_only = cross_attention_block(unet, x, e_t, None, None, None, 3).data
    assert np.array_equal(with_streams, text_only)
    assert with_streams.shape == x.shape


def test_site_output_linear_in_style_weight(unet, streams):
    e_t, e_s, e_c = streams
    x = _site_input(unet, 50)
    base = cross_attention_block(unet, x, e_t, None, None, None, 50).data
    half = cross_attention_block(unet, x, e_t, e_s, None, _policy_with(0.5, 0.0, 50), 50).data
    full = cross_attention_block(unet, x, e_t, e_s, None, _policy_with(1.0, 0.0, 50), 50).data
    np.testing.assert_allclose(full - base, 2 * (half - base), atol=1e-14)


def test_site_output_matches_three_term_formula(unet, streams):
    e_t, e_s, e_c = streams
    idx = 10
    x = _site_input(unet, idx)
    b, s = unet.base, unet.streams.params
    q = ops.matmul(ops.layer_norm(x, b[f"attn.{idx}.ln.g"], b[f"attn.{idx}.ln.b"]), b[f"attn.{idx}.q"]).data[0]
    et, es, ec = (t.tokens.data.reshape(-1, 64) for t in streams)

    def attn(k, v):
        logits = q @ k.T / np.sqrt(k.shape[-1])
        p = np.exp(logits - logits.max(-1, keepdims=True))
        return (p / p.sum(-1, keepdims=True)) @ v

    want = (
        attn(et @ b[f"attn.{idx}.k_t"].data, et @ b[f"attn.{idx}.v_t"].data)
        + 0.2 * attn(es @ s[f"{idx}.k_s"].data, es @ s[f"{idx}.v_s"].data)
        + 1.0 * attn(ec @ s[f"{idx}.k_c"].data, ec @ s[f"{idx}.v_c"].data)
    )
    got = cross_attention_block(unet, x, e_t, e_s, e_c, cdst_inference_policy(unet.registry), idx).data
    np.testing.assert_allclose(got[0], want, atol=1e-12)


def test_no_style_in_middle_and_early_decoder(unet, streams):
    e_t, e_s, e_c = streams
    pol = cdst_inference_policy(unet.registry)
    for idx in (24, 30, 34, 43):
        x = _site_input(unet, idx)
        a = cross_attention_block(unet, x, e_t, e_s, e_c, pol, idx).data
        b = cross_attention_block(unet, x, e_t, None, e_c, pol, idx).data
        assert np.array_equal(a, b)


def test_site_shape_errors(unet, streams):
    e_t, e_s, e_c = streams
    with pytest.raises(ShapeError):
        cross_attention_block(unet, Tensor(np.zeros((1, 4, 7))), e_t, e_s, e_c, None, 0)
    with pytest.raises(LayoutError):
        cross_attention_block(unet, _site_input(unet, 0), e_t, e_s, e_c, None, 70)


def _latent(seed=0, hw=16):
    return np.random.default_rng(seed).standard_normal((3, hw, hw))


def test_forward_shape_and_errors(unet, streams):
    e_t, e_s, e_c = streams
    out = unet(_latent(), 500, e_t, e_s, e_c, cdst_inference_policy(unet.registry))
    assert out.shape == (3, 16, 16)
    with pytest.raises(ShapeError):
        unet(np.zeros((3, 10, 10)), 10, e_t)
    with pytest.raises(ShapeError):
        unet(np.zeros((4, 16, 16)), 10, e_t)


def test_zeroed_projections_match_streams_off():
    model = ToyUNet(seed=4)
    model.streams.zero_()
    e_t = model.text_tokens([2])
    e_s, e_c = _tokens(3, 7, TokenKind.STYLE), _tokens(4, 4, TokenKind.COLOR)
    on = model(_latent(1), 300, e_t, e_s, e_c, training_policy(model.registry)).data
    off = model(_latent(1), 300, e_t, None, None, None).data
    # Zero keys give uniform attention over zero values, so the stream terms vanish.
    assert np.array_equal(on, off)


def test_policy_swap_reproduces_training_outputs(unet, streams):
    e_t, e_s, e_c = streams
    reg = unet.registry
    inf = cdst_inference_policy(reg)
    swapped = InjectionPolicy(np.ones(70), inf.lambda_c, np.ones(70, dtype=bool))
    a = unet(_latent(2), 200, e_t, e_s, e_c, swapped).data
    b = unet(_latent(2), 200, e_t, e_s, e_c, training_policy(reg)).data
    assert np.array_equal(a, b)


def test_streams_off_equals_no_streams(unet, streams):
    e_t, e_s, e_c = streams
    a = unet(_latent(3), 100, e_t, e_s, e_c, streams_off_policy(unet.registry)).data
    b = unet(_latent(3), 100, e_t).data
    assert np.array_equal(a, b)


def test_finite_difference_on_one_style_key_entry(unet, streams):
    e_t, e_s, e_c = streams
    pol = training_policy(unet.registry)
    x0 = _latent(4)
    target = _latent(5)
    w = unet.streams.params["60.k_s"]

    def loss():
        return ops.mse(unet(x0, 400, e_t, e_s, e_c, pol), Tensor(target))

    w.grad = None
    loss().backward()
    idx = [3, 77, 200]
    num = numeric_grad(lambda: loss().item(), w.data, indices=idx)
    assert relative_error(w.grad.reshape(-1)[idx], num.reshape(-1)[idx]) < 1e-4
    for p in unet.parameters().values():
        p.grad = None


def test_text_tokens(unet):
    e = unet.text_tokens([0, None, 3])
    assert e.tokens.shape == (3, 4, 64)
    assert np.array_equal(e.tokens.data[1], unet.base["text.null"].data)
    with pytest.raises(LayoutError):
        unet.text_tokens([9])


def test_condition_residuals(unet):
    enc = ControlEncoder(unet.control_widths)
    edges = (np.random.default_rng(0).random((32, 32)) > 0.8).astype(np.uint8)
    res = condition_residuals(edges, enc, 0.0)
    assert len(res) == 3
    assert [r.shape for r in res] == [(1, 16, 16, 32), (1, 8, 8, 32), (1, 4, 4, 64)]
    assert all(not r.data.any() for r in res)
    enc.params["z1"].data = np.eye(32)
    assert np.any(condition_residuals(edges, enc, 1.0)[1].data)
    with pytest.raises(ShapeError):
        condition_residuals(np.zeros((30, 30)), enc)


def test_residuals_enter_forward(unet, streams):
    e_t = streams[0]
    enc = ControlEncoder(unet.control_widths, seed=9)
    for k in ("z0", "z1", "z2"):
        enc.params[k].data = np.eye(enc.params[k].shape[0]) * 0.1
    edges = (np.random.default_rng(1).random((32, 32)) > 0.7).astype(np.uint8)
    res = condition_residuals(edges, enc)
    a = unet(_latent(6), 50, e_t, cond=res).data
    b = unet(_latent(6), 50, e_t).data
    zero = unet(_latent(6), 50, e_t, cond=condition_residuals(edges, enc, 0.0)).data
    assert not np.array_equal(a, b)
    assert np.array_equal(zero, b)


def test_encode_decode():
    rng = np.random.default_rng(0)
    img = ImageBuffer(rng.random((16, 16, 3)))
    z = encode_image(img)
    assert z.shape == (3, 8, 8) and z.min() >= -1 and z.max() <= 1
    # Decoding a 2x2-constant image is the identity.
    blocky = ImageBuffer(rng.random((8, 8, 3)).repeat(2, 0).repeat(2, 1))
    assert np.allclose(decode_latent(encode_image(blocky)).data, blocky.data, atol=1e-15)
    with pytest.raises(ShapeError):
        encode_image(ImageBuffer(rng.random((12, 12, 3))))
