"""Differentiable operators on NCHW tensors.

No implicit broadcasting: every shape mismatch raises ``ShapeError``.
Convolutions go through an explicit im2col / col2im pair so forward and
backward share one indexing scheme.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import InvalidTarget, ShapeError
from .core import Tensor, make_output


def _out_size(n: int, k: int, stride: int, pad: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0 or stride < 1:
        raise ShapeError(f"{what}: extent {n} too small for kernel {k} with pad {pad}")
    return span // stride + 1


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected N x C x H x W input, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, kh, kw, oh, ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def _col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the padded grid."""
    n, c, kh, kw, oh, ow = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _crop(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1
) -> Tensor:
    """Grouped 2D cross-correlation. ``w`` is ``[Cout, Cin/groups, kh, kw]``."""
    _check_4d(x, "conv2d")
    n, cin, h, wd = x.shape
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got {w.shape}")
    cout, cpg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: Cin={cin} and Cout={cout} must be divisible by groups={groups}")
    if cpg != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cpg} channels per group, input gives {cin // groups}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    oh = _out_size(h, kh, stride, pad, "conv2d height")
    ow = _out_size(wd, kw, stride, pad, "conv2d width")
    opg = cout // groups
    k = cpg * kh * kw

    xp = _pad(x.data, pad)
    cols = _im2col(xp, kh, kw, stride, oh, ow).reshape(n, groups, k, oh * ow)
    wm = w.data.reshape(groups, opg, k)
    out = np.matmul(wm[None], cols).reshape(n, cout, oh, ow)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(n, groups, opg, oh * ow)
        dw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wm.transpose(0, 2, 1)[None], gm).reshape(n, cin, kh, kw, oh, ow)
        dx = _crop(_col2im(dcols, xp.shape[2], xp.shape[3], stride), pad)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return make_output(out, inputs, backward, "conv2d")


def conv2d_transposed(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). ``w`` is ``[Cin, Cout, kh, kw]``."""
    _check_4d(x, "conv2d_transposed")
    n, cin, h, wd = x.shape
    if w.data.ndim != 4 or w.shape[0] != cin:
        raise ShapeError(f"conv2d_transposed: weight {w.shape} incompatible with {cin} input channels")
    _, cout, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d_transposed: bias shape {b.shape} != ({cout},)")
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    oh, ow = hf - 2 * pad, wf - 2 * pad
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d_transposed: padding {pad} leaves no output")

    wm = w.data.reshape(cin, cout * kh * kw)
    xm = x.data.reshape(n, cin, h * wd)
    cols = np.matmul(wm.T[None], xm).reshape(n, cout, kh, kw, h, wd)
    out = _crop(_col2im(cols, hf, wf, stride), pad).copy()
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gcols = _im2col(_pad(g, pad), kh, kw, stride, h, wd).reshape(n, cout * kh * kw, h * wd)
        dx = np.matmul(wm[None], gcols).reshape(x.shape)
        dw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return make_output(out, inputs, backward, "conv2d_transposed")


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Output channel ``j`` takes input channel ``(j % g) * (C // g) + j // g``."""
    _check_4d(x, "channel_shuffle")
    n, c, h, wd = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"channel_shuffle: {c} channels not divisible by groups={groups}")
    perm = shuffle_permutation(c, groups)
    inv = np.argsort(perm)
    out = x.data[:, perm]

    def backward(g):
        return (g[:, inv],)

    return make_output(out, (x,), backward, "channel_shuffle")


def shuffle_permutation(c: int, groups: int) -> np.ndarray:
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        return (g * mask,)

    return make_output(out, (x,), backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g, g

    return make_output(a.data + b.data, (a, b), backward, "add")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_output(out, xs, backward, "concat")


def _pool_geometry(x: Tensor, k: int, stride: int, pad: int, what: str):
    _check_4d(x, what)
    n, c, h, wd = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"{what}: input {h}x{wd} too small for kernel {k}")
    return n, c, oh, ow


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    n, c, oh, ow = _pool_geometry(x, k, stride, pad, "max_pool2d")
    xp = _pad(x.data, pad, -np.inf)
    cols = _im2col(xp, k, k, stride, oh, ow).reshape(n, c, k * k, oh, ow)
    arg = cols.argmax(axis=2)
    out = np.take_along_axis(cols, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        dcols = np.zeros((n, c, k * k, oh, ow))
        np.put_along_axis(dcols, arg[:, :, None], g[:, :, None], axis=2)
        dx = _col2im(dcols.reshape(n, c, k, k, oh, ow), xp.shape[2], xp.shape[3], stride)
        return (_crop(dx, pad),)

    return make_output(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    """Average pooling; zero padding counts towards the ``k * k`` divisor."""
    n, c, oh, ow = _pool_geometry(x, k, stride, pad, "avg_pool2d")
    xp = _pad(x.data, pad)
    out = _im2col(xp, k, k, stride, oh, ow).sum(axis=(2, 3)) / (k * k)

    def backward(g):
        dcols = np.broadcast_to((g / (k * k))[:, :, None, None], (n, c, k, k, oh, ow))
        return (_crop(_col2im(dcols, xp.shape[2], xp.shape[3], stride), pad),)

    return make_output(out, (x,), backward, "avg_pool2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over N, H, W.

    In train mode the running buffers are updated in place as
    ``run = momentum * run + (1 - momentum) * batch`` (variance unbiased).
    """
    _check_4d(x, "batch_norm")
    c = x.shape[1]
    for name, t in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {t.shape} != ({c},)")
    axes = (0, 2, 3)
    if train:
        m = x.data.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if train:
            m = x.data.size // c
            dx = (
                inv_std[None, :, None, None]
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return make_output(out, (x, gamma, beta), backward, "batch_norm")


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def weighted_cross_entropy(logits: Tensor, target, class_weights: Sequence[float]) -> Tensor:
    """Pixel cross-entropy weighted per class and normalised by total pixel weight.

    ``target`` is an integer array ``[N, H, W]`` of labels in {0, 1}.
    """
    _check_4d(logits, "weighted_cross_entropy")
    n, c, h, wd = logits.shape
    if c != 2:
        raise ShapeError(f"weighted_cross_entropy: expected 2 classes, got {c}")
    t = np.asarray(target)
    if t.shape != (n, h, wd):
        raise ShapeError(f"weighted_cross_entropy: target shape {t.shape} != {(n, h, wd)}")
    if not np.all((t == 0) | (t == 1)):
        raise InvalidTarget("targets must be 0 (static) or 1 (moving)")
    wts = np.asarray(class_weights, dtype=np.float64)
    if wts.shape != (2,) or np.any(wts <= 0):
        raise ValueError("class_weights must be two positive numbers")
    t = t.astype(np.intp)
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    pix_w = wts[t]
    total = pix_w.sum()
    loss = -(pix_w * picked).sum() / total

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
        return (g * (p - onehot) * (pix_w / total)[:, None],)

    return make_output(np.asarray(loss), (logits,), backward, "weighted_cross_entropy")
