"""Differentiable operations over :class:`Tensor`.

Image tensors are channels-last, ``(B, H, W, C)``. Binary elementwise ops
accept numpy broadcasting; the gradient of a broadcast operand is summed back
to its own shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return Tensor._from_op(a.data * s, (a,), backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a: (..., n, k)`` and ``b: (k, m)`` or ``(..., k, m)`` with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {ad.shape} vs {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(out, (a,), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(a.data, axes), (a,), backward)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool(a, axis: int) -> Tensor:
    """Average over one axis (token or spatial positions)."""
    return mean(a, axis=axis)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = g * (2.0 / n) * diff
        return d, -d

    return Tensor._from_op(np.asarray(np.mean(diff * diff)), (pred, target), backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (a,), backward)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine ``gamma``, ``beta``."""
    x = as_tensor(x)
    c = x.shape[-1]
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (c,):
            raise ShapeError(f"layer_norm: gamma {gamma.shape} does not match width {c}")
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (c,):
            raise ShapeError(f"layer_norm: beta {beta.shape} does not match width {c}")
        parents.append(beta)
    # Row means as a matrix-vector product: much faster than a reduce over a
    # short trailing axis.
    avg = np.full(c, 1.0 / c)
    xc = x.data - (x.data @ avg)[..., None]
    inv = 1.0 / np.sqrt(((xc * xc) @ avg)[..., None] + eps)
    xhat = xc
    xhat *= inv
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out += beta.data

    def backward(g):
        grads = []
        gx_hat = g * gd if gd is not None else g
        if x.requires_grad:
            gx = gx_hat - (gx_hat @ avg)[..., None]
            gx -= xhat * ((gx_hat * xhat) @ avg)[..., None]
            gx *= inv
            grads.append(gx)
        else:
            grads.append(None)
        flat = g.reshape(-1, c)
        if gamma is not None:
            grads.append((flat * xhat.reshape(-1, c)).sum(axis=0) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(flat.sum(axis=0) if beta.requires_grad else None)
        return grads

    return Tensor._from_op(out, tuple(parents), backward)


def gelu(a) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    a = as_tensor(a)
    x = a.data
    th = x * x
    th *= 0.044715 * _GELU_C
    th += _GELU_C
    th *= x
    np.tanh(th, out=th)
    out = th + 1.0
    out *= 0.5
    out *= x

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 k x^2)
        d = x * x
        d *= 3 * 0.044715 * _GELU_C
        d += _GELU_C
        d *= x
        d *= 1.0 - th * th
        d += 1.0 + th
        d *= 0.5
        d *= g
        return (d,)

    return Tensor._from_op(out, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward)


def upsample2x(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of a ``(B, H, W, C)`` tensor."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"upsample2x: expected (B, H, W, C), got {a.shape}")
    b, h, w, c = a.shape

    def backward(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return Tensor._from_op(a.data.repeat(2, axis=1).repeat(2, axis=2), (a,), backward)


def conv2d(x, w, bias=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1.

    ``x``: ``(B, H, W, Cin)``; ``w``: ``(3, 3, Cin, Cout)``; ``bias``: ``(Cout,)``.
    With stride 2 the output is ``(B, ceil(H/2), ceil(W/2), Cout)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[3],):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {w.shape[3]} outputs")
        parents.append(bias)
    B, H, W, C = x.shape
    cout = w.shape[3]
    ho, wo = (H + stride - 1) // stride, (W + stride - 1) // stride
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate(
        [xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] for i in range(3) for j in range(3)],
        axis=-1,
    )
    wmat = w.data.reshape(9 * C, cout)
    out = cols.reshape(-1, 9 * C) @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, ho, wo, cout)
    keep_cols = cols if w.requires_grad else None
    del cols

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, ho, wo, 9, C)
            dxp = np.zeros((B, H + 2, W + 2, C))
            k = 0
            for i in range(3):
                for j in range(3):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, k, :]
                    k += 1
            gx = dxp[:, 1 : H + 1, 1 : W + 1, :]
        gw = (keep_cols.reshape(-1, 9 * C).T @ g2).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return Tensor._from_op(out, tuple(parents), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` over the last axis."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def attention(q, k, v, d: float | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` with ``q: (..., n, dk)``, ``k: (..., m, dk)``, ``v: (..., m, dv)``.

    ``d`` defaults to the key width. Batch dims must agree.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    if (
        qd.ndim < 2
        or kd.ndim != qd.ndim
        or vd.ndim != qd.ndim
        or qd.shape[-1] != kd.shape[-1]
        or kd.shape[-2] != vd.shape[-2]
        or qd.shape[:-2] != kd.shape[:-2]
        or kd.shape[:-2] != vd.shape[:-2]
    ):
        raise ShapeError(f"attention: incompatible q {qd.shape}, k {kd.shape}, v {vd.shape}")
    d = float(kd.shape[-1] if d is None else d)
    if d <= 0:
        raise ShapeError("attention: d must be positive")
    s = 1.0 / math.sqrt(d)
    logits = (qd @ np.swapaxes(kd, -1, -2)) * s
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            dp = g @ np.swapaxes(vd, -1, -2)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * s
            if q.requires_grad:
                gq = ds @ kd
            if k.requires_grad:
                gk = np.swapaxes(ds, -1, -2) @ qd
        return gq, gk, gv

    return Tensor._from_op(p @ vd, (q, k, v), backward)


def multi_attention(q, streams: Sequence[tuple]) -> Tensor:
    """``sum_i w_i * attention(q, k_i, v_i)`` as one graph node.

    ``streams`` holds ``(k, v, w)`` triples sharing the query; each term is
    scaled by ``1/sqrt`` of its own key width.
    """
    q = as_tensor(q)
    qd = q.data
    ks, vs, ws, ps, scales = [], [], [], [], []
    out = None
    for k, v, w in streams:
        k, v = as_tensor(k), as_tensor(v)
        kd, vd = k.data, v.data
        if kd.ndim != qd.ndim or qd.shape[-1] != kd.shape[-1] or kd.shape[:-1] != vd.shape[:-1] or kd.shape[:-2] != qd.shape[:-2]:
            raise ShapeError(f"multi_attention: incompatible q {qd.shape}, k {kd.shape}, v {vd.shape}")
        s = 1.0 / math.sqrt(kd.shape[-1])
        logits = (qd @ np.swapaxes(kd, -1, -2)) * s
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        term = p @ vd
        if w != 1.0:
            term *= w
        out = term if out is None else out + term
        ks.append(k)
        vs.append(v)
        ws.append(float(w))
        ps.append(p)
        scales.append(s)
    if out is None:
        raise ShapeError("multi_attention: no streams given")

    def backward(g):
        gq = np.zeros_like(qd) if q.requires_grad else None
        grads: list = [gq]
        for k, v, w, p, s in zip(ks, vs, ws, ps, scales):
            gw = g * w if w != 1.0 else g
            gv = np.swapaxes(p, -1, -2) @ gw if v.requires_grad else None
            gk = None
            if q.requires_grad or k.requires_grad:
                dp = gw @ np.swapaxes(v.data, -1, -2)
                ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * s
                if q.requires_grad:
                    gq += ds @ k.data
                if k.requires_grad:
                    gk = np.swapaxes(ds, -1, -2) @ qd
            grads.extend((gk, gv))
        return grads

    parents = [q]
    for k, v in zip(ks, vs):
        parents.extend((k, v))
    return Tensor._from_op(out, tuple(parents), backward)
