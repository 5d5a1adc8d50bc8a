import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdst.tensorcore import (
    NonFiniteGradient,
    OptimizerState,
    ShapeError,
    Tensor,
    adamw_step,
    checkpoint,
    no_grad,
    ops,
    parameter,
)
from gradcheck import OP_CASES, check, weighted_sum

TOL = 1e-4


def _r(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_finite_difference(name):
    build, shapes = OP_CASES[name]
    arrays_ = [np.random.default_rng(i + 1).standard_normal(s) for i, s in enumerate(shapes)]
    assert check(build, arrays_) < TOL


def test_three_layer_composite_gradient():
    def build(x, w1, w2, w3, g):
        h = ops.gelu(ops.matmul(x, w1))
        h = ops.layer_norm(ops.matmul(h, w2), g)
        return weighted_sum(ops.softmax(ops.matmul(h, w3)))

    shapes = [(4, 5), (5, 6), (6, 6), (6, 3), (6,)]
    assert check(build, [_r(i + 10, *s) for i, s in enumerate(shapes)]) < TOL


def test_softmax_rows_sum_to_one():
    p = ops.softmax(Tensor(_r(0, 5, 7) * 30)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-15)


def test_matmul_identity():
    x = _r(1, 4, 6)
    assert np.array_equal(ops.matmul(Tensor(x), Tensor(np.eye(6))).data, x)


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(_r(0, 2, 3)), Tensor(_r(0, 4, 2)))
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(_r(0, 2, 3)), Tensor(_r(0, 4, 2)))
    with pytest.raises(ShapeError, match="attention"):
        ops.attention(Tensor(_r(0, 2, 3)), Tensor(_r(0, 4, 2)), Tensor(_r(0, 4, 2)))
    with pytest.raises(ShapeError, match="conv2d"):
        ops.conv2d(Tensor(_r(0, 1, 4, 4, 2)), Tensor(_r(0, 3, 3, 3, 1)))


def test_attention_single_key_returns_value_row():
    q = _r(0, 5, 4)
    k, v = _r(1, 1, 4), _r(2, 1, 3)
    out = ops.attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, np.broadcast_to(v, (5, 3)), atol=1e-15)


def test_attention_temperature_limit():
    # Orthonormal keys equal to the queries: as the scale grows each query
    # attends only to its own key.
    qk, _ = np.linalg.qr(_r(3, 4, 4))
    v = _r(4, 4, 2)
    for scale, tol in ((10.0, 1e-3), (40.0, 1e-12)):
        out = ops.attention(Tensor(qk * scale), Tensor(qk), Tensor(v), d=1.0).data
        assert np.max(np.abs(out - v)) < tol


def test_attention_matches_direct_formula():
    q, k, v = _r(0, 3, 4), _r(1, 5, 4), _r(2, 5, 2)
    logits = q @ k.T / math.sqrt(4)
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(ops.attention(Tensor(q), Tensor(k), Tensor(v)).data, p @ v, atol=1e-14)


def test_multi_attention_is_weighted_sum_of_attentions():
    q = _r(0, 2, 3, 4)
    k1, v1, k2, v2 = _r(1, 2, 5, 4), _r(2, 2, 5, 3), _r(3, 2, 2, 4), _r(4, 2, 2, 3)
    got = ops.multi_attention(Tensor(q), [(k1, v1, 1.0), (k2, v2, 0.4)]).data
    want = ops.attention(q, k1, v1).data + 0.4 * ops.attention(q, k2, v2).data
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_no_grad_builds_no_graph():
    p = parameter(_r(0, 3))
    with no_grad():
        y = ops.sum(ops.mul(p, p))
    assert not y.requires_grad


def test_gradients_accumulate_across_backward_calls():
    p = parameter(_r(0, 3))
    ops.sum(p).backward()
    ops.sum(p).backward()
    np.testing.assert_array_equal(p.grad, np.full(3, 2.0))


def test_adamw_zero_grad_zero_decay_is_fixed_point():
    p = parameter(_r(0, 4))
    before = p.data.copy()
    adamw_step({"p": p}, {"p": np.zeros(4)}, OptimizerState(weight_decay=0.0))
    assert np.array_equal(p.data, before)


def test_adamw_scalar_hand_calculation():
    # One step from zero state: m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2,
    # so the update is lr * g / (|g| + eps) plus the decay lr * wd * p.
    p = parameter(np.array(2.0))
    state = OptimizerState(lr=0.1, weight_decay=0.5, eps=1e-8)
    adamw_step({"p": p}, {"p": np.array(0.3)}, state)
    expected = 2.0 - 0.1 * 0.5 * 2.0 - 0.1 * 0.3 / (0.3 + 1e-8)
    assert p.data == pytest.approx(expected, abs=1e-15)
    assert state.step == 1


def test_adamw_decoupled_decay():
    p = parameter(np.array([1.0, -2.0, 0.5]))
    before = p.data.copy()
    adamw_step({"p": p}, {"p": np.zeros(3)}, OptimizerState(lr=0.01, weight_decay=0.1))
    np.testing.assert_allclose(before - p.data, 0.01 * 0.1 * before, atol=1e-16)


def test_adamw_rejects_non_finite():
    p = parameter(np.zeros(2))
    with pytest.raises(NonFiniteGradient):
        adamw_step({"p": p}, {"p": np.array([np.nan, 0.0])}, OptimizerState())


def test_checkpoint_round_trip(tmp_path):
    entries = {"a": _r(0, 2, 3), "b.c": np.array(1.5), "z": _r(1, 4)}
    checkpoint.save(tmp_path / "m.ckpt", entries)
    back = checkpoint.load(tmp_path / "m.ckpt")
    assert set(back) == set(entries)
    for k in entries:
        assert np.array_equal(back[k], entries[k])
    assert checkpoint.dumps(entries) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"not a checkpoint")
    blob = checkpoint.dumps({"a": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-8])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_normalized_property(x):
    p = ops.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 4, 4, 2), elements=st.floats(-1, 1)))
def test_ops_are_deterministic(x):
    w = _r(5, 3, 3, 2, 2)
    a = ops.gelu(ops.conv2d(x, w)).data
    b = ops.gelu(ops.conv2d(x, w)).data
    assert np.array_equal(a, b)
