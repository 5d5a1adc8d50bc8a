import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdst.colorlab import ColorError, ImageBuffer, extract_histogram, greyscale, luma_preserving_recolor
from cdst.embed import (
    PAPER_EXTRACTOR,
    TOY_EXTRACTOR,
    ColorEmbedder,
    EmbedError,
    ExtractorSpec,
    FeatureStack,
    StyleEmbedder,
    TokenKind,
    TokenSet,
    compress_style,
    embed_color,
    toy_features,
)
from cdst.tensorcore import Tensor


def _rgb(seed, size=32):
    return ImageBuffer(np.random.default_rng(seed).random((size, size, 3)))


@pytest.fixture(scope="module")
def style():
    return StyleEmbedder()


@pytest.fixture(scope="module")
def color():
    return ColorEmbedder()


def test_feature_stack_has_three_shallow_grids_and_a_deep_one():
    stack = toy_features(greyscale(_rgb(0)))
    assert [b for b, _ in stack.grids] == [1, 3, 5, 7]
    assert stack.width == 32 and stack.cls.shape == (32,)


def test_features_are_deterministic():
    g = greyscale(_rgb(1))
    a, b = toy_features(g), toy_features(g)
    for (ia, ga), (ib, gb) in zip(a.grids, b.grids):
        assert ia == ib and np.array_equal(ga, gb)


def test_features_reject_colour_input():
    with pytest.raises(EmbedError):
        toy_features(_rgb(0))


def test_luma_equal_pair_gives_identical_style_tokens(style):
    base = _rgb(2)
    other = luma_preserving_recolor(base, 120.0)
    assert np.mean(np.abs(other.data - base.data)) > 0.1
    ga, gb = greyscale(base), greyscale(other)
    assert np.array_equal(ga.data, gb.data)
    ta = compress_style(toy_features(ga), style).tokens.data
    tb = compress_style(toy_features(gb), style).tokens.data
    assert np.array_equal(ta, tb)


def test_style_token_count_and_width(style):
    ts = compress_style(toy_features(greyscale(_rgb(3))), style)
    assert ts.kind is TokenKind.STYLE
    assert ts.tokens.shape == (7, 64)


def test_batched_style_matches_single(style):
    stacks = [toy_features(greyscale(_rgb(s))) for s in (4, 5)]
    batched = compress_style(stacks, style).tokens.data
    for i, s in enumerate(stacks):
        np.testing.assert_allclose(batched[i], compress_style(s, style).tokens.data, atol=1e-13)


def test_shallow_grid_permutation_leaves_tokens_unchanged(style):
    stack = toy_features(greyscale(_rgb(6)))
    perm = np.random.default_rng(0).permutation(stack.grids[0][1].shape[0])
    grids = [(b, g[perm] if b == 1 else g) for b, g in stack.grids]
    a = compress_style(stack, style).tokens.data
    b = compress_style(FeatureStack(grids, stack.cls), style).tokens.data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_missing_deep_grid(style):
    stack = toy_features(greyscale(_rgb(7)))
    with pytest.raises(EmbedError):
        compress_style(FeatureStack(stack.grids[:-1], stack.cls), style)


def test_feature_stack_round_trip(tmp_path, style):
    stack = toy_features(greyscale(_rgb(8)))
    stack.save(tmp_path / "f.ckpt")
    back = FeatureStack.load(tmp_path / "f.ckpt")
    assert np.array_equal(compress_style(back, style).tokens.data, compress_style(stack, style).tokens.data)


def test_extractor_specs():
    assert PAPER_EXTRACTOR.shallow_taps == (5, 11, 17) and PAPER_EXTRACTOR.deep_tap == 49
    assert len(TOY_EXTRACTOR.shallow_taps) + 1 == 4
    with pytest.raises(EmbedError):
        ExtractorSpec(blocks=8, shallow_taps=(1, 3), deep_tap=6, width=8)
    with pytest.raises(EmbedError):
        ExtractorSpec(blocks=8, shallow_taps=(3, 1), deep_tap=7, width=8)


def test_imported_paper_scale_features():
    rng = np.random.default_rng(0)
    spec = ExtractorSpec(blocks=50, shallow_taps=(5, 11, 17), deep_tap=49, width=16)
    stack = FeatureStack([(b, rng.standard_normal((9, 16))) for b in (5, 11, 17, 49)], rng.standard_normal(16))
    ts = compress_style(stack, StyleEmbedder(spec, d_e=24))
    assert ts.tokens.shape == (7, 24)


def test_color_tokens(color):
    h = extract_histogram(_rgb(9))
    ts = embed_color(h, color)
    assert ts.kind is TokenKind.COLOR and ts.tokens.shape == (4, 64)
    assert np.array_equal(ts.tokens.data, embed_color(h, color).tokens.data)
    with pytest.raises(ColorError):
        embed_color(np.ones(17) / 17, color)


def test_permuted_pixels_give_identical_color_tokens(color):
    img = _rgb(10)
    flat = img.data.reshape(-1, 3)
    perm = np.random.default_rng(1).permutation(len(flat))
    other = ImageBuffer(flat[perm].reshape(img.data.shape))
    a = embed_color(extract_histogram(img), color).tokens.data
    b = embed_color(extract_histogram(other), color).tokens.data
    assert np.array_equal(a, b)


def test_token_set_count_enforced():
    with pytest.raises(EmbedError):
        TokenSet(Tensor(np.zeros((5, 8))), TokenKind.STYLE)
    with pytest.raises(EmbedError):
        TokenSet(Tensor(np.zeros((3, 8))), TokenKind.COLOR)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 360), st.floats(0, 1.5))
def test_style_stream_is_colour_blind(seed, degrees, chroma):
    style = _shared_style()
    base = ImageBuffer(np.random.default_rng(seed).random((16, 16, 3)))
    other = luma_preserving_recolor(base, degrees, chroma)
    a = compress_style(toy_features(greyscale(base)), style).tokens.data
    b = compress_style(toy_features(greyscale(other)), style).tokens.data
    assert np.array_equal(a, b)


_STYLE = []


def _shared_style():
    if not _STYLE:
        _STYLE.append(StyleEmbedder())
    return _STYLE[0]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_colour_stream_is_layout_blind(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((8, 8, 3))
    flat = img.reshape(-1, 3)
    other = flat[rng.permutation(64)].reshape(8, 8, 3)
    emb = _shared_color()
    a = embed_color(extract_histogram(ImageBuffer(img)), emb).tokens.data
    b = embed_color(extract_histogram(ImageBuffer(other)), emb).tokens.data
    assert np.array_equal(a, b)


_COLOR = []


def _shared_color():
    if not _COLOR:
        _COLOR.append(ColorEmbedder())
    return _COLOR[0]
