"""Differentiable operations.

Image-like ops accept either an unbatched ``[C, H, W]`` tensor or a batched
``[B, C, H, W]`` one; the batched form is what the model uses internally.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result, note_branch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_result("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    note_branch(a.data > 0)
    return make_result("abs", np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    note_branch(out > 0)
    return make_result("relu", out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result("sum", out, (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return make_result(
        "transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),)
    )


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result("getitem", x.data[index], (x,), grad_fn)


def take(x, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in backward."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)

    def grad_fn(g):
        n = indices.size
        scatter = sparse.csr_matrix((np.ones(n), (indices, np.arange(n))), shape=(x.shape[0], n))
        return (np.asarray(scatter @ g.reshape(n, -1)).reshape(x.shape),)

    return make_result("take", x.data[indices], (x,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def concat_channels(tensors: Sequence) -> Tensor:
    """Stack ``[C_i, H, W]`` (or ``[B, C_i, H, W]``) blocks along channels in argument order."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ValueError(f"rank mismatch: {t.ndim} vs {len(ref)}")
        if t.shape[-2:] != ref[-2:]:
            raise ValueError(f"spatial mismatch: H,W {t.shape[-2:]} vs {ref[-2:]}")
        if t.shape[:-3] != ref[:-3]:
            raise ValueError(f"batch mismatch: {t.shape[:-3]} vs {ref[:-3]}")
    return concat(tensors, axis=-3)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- layers


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"{op} expects [C,H,W] or [B,C,H,W], got shape {x.shape}")


def conv2d(x, kernels, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    xb, squeeze = _batched(x, "conv2d")
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be [C_out,C_in,kh,kw], got shape {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if xb.shape[1] != c_in:
        raise ValueError(f"conv2d C_in mismatch: input has {xb.shape[1]} channels, kernels expect {c_in}")
    if padding not in (0, 1):
        raise ValueError(f"padding must be 0 or 1, got {padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
    B, _, H, W = xb.shape
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d H/W too small: input {H}x{W} with padding {padding}")
    impl = _conv_shifted if c_out <= c_in else _conv_im2col
    out, grad_core = impl(xb, kernels.data, padding, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if squeeze else g
        dx, dw = grad_core(gb, x.requires_grad)
        if dx is not None and squeeze:
            dx = dx[0]
        db = gb.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw, db

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_result("conv2d", out, parents, grad_fn)


def _conv_im2col(xb, w, padding, Ho, Wo):
    B, C, H, W = xb.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, c_out).transpose(0, 3, 1, 2)

    def grad_core(g, need_dx):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (g2.T @ cols).reshape(w.shape)
        dx = None
        if need_dx:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return dx, dw

    return np.ascontiguousarray(out), grad_core


def _conv_shifted(xb, w, padding, Ho, Wo):
    # one GEMM over the padded grid for all kernel offsets, then shifted sums;
    # avoids materializing kh*kw copies of the input
    B, C, H, W = xb.shape
    c_out, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    xp = np.zeros((C, B, Hp, Wp))
    xp[:, :, padding:padding + H, padding:padding + W] = xb.transpose(1, 0, 2, 3)
    xflat = xp.reshape(C, -1)
    wall = w.transpose(2, 3, 0, 1).reshape(kh * kw * c_out, C)
    z = (wall @ xflat).reshape(kh, kw, c_out, B, Hp, Wp)
    out = np.zeros((c_out, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            out += z[i, j, :, :, i:i + Ho, j:j + Wo]
    del z

    def grad_core(g, need_dx):
        gs = np.zeros((kh, kw, c_out, B, Hp, Wp))
        gt = g.transpose(1, 0, 2, 3)
        for i in range(kh):
            for j in range(kw):
                gs[i, j, :, :, i:i + Ho, j:j + Wo] = gt
        gflat = gs.reshape(kh * kw * c_out, -1)
        dw = (gflat @ xflat.T).reshape(kh, kw, c_out, C).transpose(2, 3, 0, 1)
        dx = None
        if need_dx:
            dxp = (wall.T @ gflat).reshape(C, B, Hp, Wp)
            dx = dxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        return dx, np.ascontiguousarray(dw)

    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), grad_core


class BatchNormStats:
    """Running mean/variance used by batchnorm in eval mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)
        self.populated = False

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float = BN_MOMENTUM) -> None:
        if not self.populated:
            self.mean[:], self.var[:] = mean, var
            self.populated = True
        else:
            self.mean[:] = (1.0 - momentum) * self.mean + momentum * mean
            self.var[:] = (1.0 - momentum) * self.var + momentum * var


def _channel_sum(a: np.ndarray) -> np.ndarray:
    # [B, C, H, W] -> [C]; reducing the contiguous axis first is much faster
    return a.reshape(a.shape[0], a.shape[1], -1).sum(axis=2).sum(axis=0)


def batchnorm(x, gamma, beta, mode: str = "train", running: Optional[BatchNormStats] = None) -> Tensor:
    """Per-channel normalization over every non-channel position of the input.

    Train mode uses the statistics of the tensor it is given (all batch and
    spatial positions) and folds them into ``running``; eval mode uses
    ``running``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xb, squeeze = _batched(x, "batchnorm")
    C = xb.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must have shape ({C},), got {gamma.shape}/{beta.shape}")
    shp = (1, C, 1, 1)
    m = xb.size // C
    if mode == "train":
        mu = _channel_sum(xb) / m
        xhat = xb - mu.reshape(shp)
        var = _channel_sum(xhat * xhat) / m
        if running is not None:
            running.update(mu, var * m / max(m - 1, 1))
    elif mode == "eval":
        if running is None or not running.populated:
            raise ValueError("batchnorm eval mode needs populated running statistics")
        mu, var = running.mean, running.var
        xhat = xb - mu.reshape(shp)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat *= inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp)
    out += beta.data.reshape(shp)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if squeeze else g
        gx = gb * xhat
        dgamma = _channel_sum(gx)
        dbeta = _channel_sum(gb)
        scale = (gamma.data * inv).reshape(shp)
        if mode == "train":
            np.multiply(xhat, (dgamma / m).reshape(shp), out=gx)
            dx = gb - (dbeta / m).reshape(shp)
            dx -= gx
            dx *= scale
        else:
            dx = gb * scale
        if squeeze:
            dx = dx[0]
        return dx, dgamma, dbeta

    return make_result("batchnorm", out, (x, gamma, beta), grad_fn)


def maxpool2d(x, window: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pooling with floor semantics.

    The gradient goes to the first maximal element in row-major window order.
    """
    if window != 2:
        raise ValueError(f"only window=2 is supported, got {window}")
    x = as_tensor(x)
    xb, squeeze = _batched(x, "maxpool2d")
    B, C, H, W = xb.shape
    if H < 2 or W < 2:
        raise ValueError(f"maxpool2d needs H,W >= 2, got H={H}, W={W}")
    Ho, Wo = H // 2, W // 2
    corners = [xb[:, :, di:2 * Ho:2, dj:2 * Wo:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    note_branch(np.stack([c == out for c in corners]))
    if squeeze:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if squeeze else g
        dx = np.zeros_like(xb)
        taken = np.zeros((B, C, Ho, Wo), dtype=bool)
        ob = out[None] if squeeze else out
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = corners[k] == ob
            hit &= ~taken
            taken |= hit
            dx[:, :, di:2 * Ho:2, dj:2 * Wo:2] = gb * hit
        return (dx[0] if squeeze else dx,)

    return make_result("maxpool2d", out, (x,), grad_fn)


def dense(x, weights, bias) -> Tensor:
    """``x @ weights.T + bias`` over the last axis."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2:
        raise ValueError(f"weights must be [D_out,D_in], got shape {weights.shape}")
    d_out, d_in = weights.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"dense D_in mismatch: input has {x.shape[-1]}, weights expect {d_in}")
    if bias.shape != (d_out,):
        raise ValueError(f"bias must have shape ({d_out},), got {bias.shape}")
    out = x.data @ weights.data.T + bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        return (g @ weights.data, g2.T @ x2, g2.sum(axis=0))

    return make_result("dense", out, (x, weights, bias), grad_fn)


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over the two trailing spatial axes."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool expects [...,C,H,W], got shape {x.shape}")
    return mean(x, axis=(-2, -1))


def flatten(x, start: int = 1) -> Tensor:
    x = as_tensor(x)
    return reshape(x, x.shape[:start] + (-1,))


# operator sugar
Tensor.__add__ = lambda a, b: add(a, b)
Tensor.__radd__ = lambda a, b: add(b, a)
Tensor.__sub__ = lambda a, b: sub(a, b)
Tensor.__rsub__ = lambda a, b: sub(b, a)
Tensor.__mul__ = lambda a, b: mul(a, b)
Tensor.__rmul__ = lambda a, b: mul(b, a)
Tensor.__neg__ = lambda a: neg(a)
Tensor.__truediv__ = lambda a, b: mul(a, 1.0 / b)
Tensor.__getitem__ = lambda a, idx: getitem(a, idx)
Tensor.sum = lambda a, axis=None, keepdims=False: sum_(a, axis, keepdims)
Tensor.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
