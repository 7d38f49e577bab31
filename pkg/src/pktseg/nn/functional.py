"""Differentiable 3D operations on (B, C, D, H, W) DiffTensors.

Each op computes its forward value with NumPy and, when gradients are being
tracked, attaches a closure that accumulates exact gradients into its inputs.
Values keep the dtype of the input (float32 for training, float64 for
gradient checking).
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import DegenerateBatch, OddDimension, ShapeMismatch
from .tensor import DiffTensor, as_tensor, make_result

CE_CLAMP = 1e-7
DICE_EPS = 1e-5


def _offsets(k):
    return itertools.product(range(k), range(k), range(k))


def _strided(start, count, step):
    return slice(start, start + step * (count - 1) + 1, step)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation (no kernel flip) with a cubic kernel.

    weight: (C_out, C_in, k, k, k); bias: (C_out,) or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xv, w = x.values, weight.values
    if xv.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5-axis input and kernel, got {xv.shape}, {w.shape}")
    B, C, D, H, W = xv.shape
    O, Ci, k = w.shape[0], w.shape[1], w.shape[2]
    if Ci != C:
        raise ShapeMismatch(f"input has {C} channels, kernel expects {Ci}")
    s, p = int(stride), int(padding)
    spans = [n - k + 2 * p for n in (D, H, W)]
    if min(spans) < 0 or any(sp % s for sp in spans):
        raise ShapeMismatch(f"(d - k + 2p)/s is not integral for dims {(D, H, W)}, k={k}, s={s}, p={p}")
    Do, Ho, Wo = (sp // s + 1 for sp in spans)
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xv
    out = np.zeros((B, O, Do, Ho, Wo), dtype=xv.dtype)
    for i, j, l in _offsets(k):
        sl = (slice(None), slice(None), _strided(i, Do, s), _strided(j, Ho, s), _strided(l, Wo, s))
        out += np.einsum("bcdhw,oc->bodhw", xp[sl], w[:, :, i, j, l], optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.values.reshape(1, O, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        if weight.requires_grad:
            gw = np.empty_like(w)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for i, j, l in _offsets(k):
            sl = (slice(None), slice(None), _strided(i, Do, s), _strided(j, Ho, s), _strided(l, Wo, s))
            if weight.requires_grad:
                gw[:, :, i, j, l] = np.einsum("bodhw,bcdhw->oc", g, xp[sl], optimize=True)
            if x.requires_grad:
                gxp[sl] += np.einsum("bodhw,oc->bcdhw", g, w[:, :, i, j, l], optimize=True)
        if weight.requires_grad:
            weight.accumulate(gw)
        if x.requires_grad:
            x.accumulate(gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3, 4)))

    return make_result(out, parents, backward)


def conv_transpose3d(x, weight, bias=None, stride=2):
    """Transposed convolution; weight is (C_in, C_out, k, k, k).

    Output spatial size is (n - 1) * stride + k. It is the adjoint of
    :func:`conv3d` with the same kernel array and stride (no padding).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xv, w = x.values, weight.values
    if xv.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv_transpose3d expects 5-axis input and kernel, got {xv.shape}, {w.shape}")
    B, C, D, H, W = xv.shape
    Ci, O, k = w.shape[0], w.shape[1], w.shape[2]
    if Ci != C:
        raise ShapeMismatch(f"input has {C} channels, kernel expects {Ci}")
    s = int(stride)
    out = np.zeros((B, O, (D - 1) * s + k, (H - 1) * s + k, (W - 1) * s + k), dtype=xv.dtype)
    for i, j, l in _offsets(k):
        sl = (slice(None), slice(None), _strided(i, D, s), _strided(j, H, s), _strided(l, W, s))
        out[sl] += np.einsum("bcdhw,co->bodhw", xv, w[:, :, i, j, l], optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.values.reshape(1, O, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        gx = np.zeros_like(xv) if x.requires_grad else None
        gw = np.empty_like(w) if weight.requires_grad else None
        for i, j, l in _offsets(k):
            sl = (slice(None), slice(None), _strided(i, D, s), _strided(j, H, s), _strided(l, W, s))
            gs = g[sl]
            if gx is not None:
                gx += np.einsum("bodhw,co->bcdhw", gs, w[:, :, i, j, l], optimize=True)
            if gw is not None:
                gw[:, :, i, j, l] = np.einsum("bcdhw,bodhw->co", xv, gs, optimize=True)
        if gx is not None:
            x.accumulate(gx)
        if gw is not None:
            weight.accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3, 4)))

    return make_result(out, parents, backward)


def batchnorm3d(x, gamma, beta, running_mean, running_var, train=True, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (batch, D, H, W).

    In train mode the batch statistics (population variance) normalize the
    input and ``running_mean`` / ``running_var`` (plain arrays) are updated in
    place with ``momentum``; the running variance uses the unbiased estimate.
    Eval mode normalizes with the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xv = x.values
    C = xv.shape[1]
    if gamma.values.shape != (C,) or beta.values.shape != (C,):
        raise ShapeMismatch(f"batch norm params must have shape ({C},)")
    axes = (0, 2, 3, 4)
    shape = (1, C, 1, 1, 1)
    n = xv.size // C
    if train:
        if n < 2:
            raise DegenerateBatch("batch norm needs at least 2 values per channel in train mode")
        mean = xv.mean(axis=axes)
        centered = xv - mean.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        if eps == 0 and np.any(var == 0):
            raise DegenerateBatch("zero batch variance with eps = 0")
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * invstd.reshape(shape)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * n / (n - 1)).astype(running_var.dtype)
    else:
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(xv.dtype)
        xhat = (xv - running_mean.reshape(shape).astype(xv.dtype)) * invstd.reshape(shape)
    out = xhat * gamma.values.reshape(shape) + beta.values.reshape(shape)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.values.reshape(shape)
            if train:
                m1 = gxhat.mean(axis=axes).reshape(shape)
                m2 = (gxhat * xhat).mean(axis=axes).reshape(shape)
                x.accumulate((gxhat - m1 - xhat * m2) * invstd.reshape(shape))
            else:
                x.accumulate(gxhat * invstd.reshape(shape))

    return make_result(out, [x, gamma, beta], backward)


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    out = np.where(mask, x.values, 0).astype(x.values.dtype)

    def backward(g):
        x.accumulate(g * mask)

    return make_result(out, [x], backward)


def softmax_channels(x):
    """Softmax over axis 1, stabilized by subtracting the per-voxel max."""
    x = as_tensor(x)
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        x.accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))

    return make_result(out, [x], backward)


def downsample(x, factor=2):
    """2x2x2 max pooling. Gradient goes to the first maximal voxel of each block."""
    x = as_tensor(x)
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    xv = x.values
    B, C, D, H, W = xv.shape
    if D % 2 or H % 2 or W % 2:
        raise OddDimension(f"spatial dims {(D, H, W)} must be even to downsample")
    blocks = (xv.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7)
              .reshape(B, C, D // 2, H // 2, W // 2, 8))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=xv.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(B, C, D // 2, H // 2, W // 2, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(B, C, D, H, W))
        x.accumulate(gx)

    return make_result(out, [x], backward)


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != b.values.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g[:, :ca])
        if b.requires_grad:
            b.accumulate(g[:, ca:])

    return make_result(out, [a, b], backward)


def dice_ce_loss(probs, target, eps=DICE_EPS, clamp=CE_CLAMP):
    """(1 - soft Dice of the foreground channel) + mean voxel cross-entropy.

    probs: softmax output (B, K, ...); target: one-hot array of the same shape.
    Soft Dice = (2 sum p t + eps) / (sum p + sum t + eps), summed over the whole
    batch for channel 1. Cross-entropy uses log(max(p, clamp)).
    """
    probs = as_tensor(probs)
    p = probs.values
    t = np.asarray(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise ShapeMismatch(f"probs {p.shape} and target {t.shape} differ")
    pf, tf = p[:, 1], t[:, 1]
    inter = (pf * tf).sum()
    denom = pf.sum() + tf.sum() + eps
    dice = (2 * inter + eps) / denom
    n_vox = p.size // p.shape[1]
    pc = np.maximum(p, clamp)
    ce = -(t * np.log(pc)).sum() / n_vox
    loss = np.asarray((1 - dice) + ce, dtype=p.dtype)

    def backward(g):
        gp = np.zeros_like(p)
        # d(1 - dice)/dp_fg = -(2 t * denom - (2 inter + eps)) / denom^2
        gp[:, 1] = -(2 * tf * denom - (2 * inter + eps)) / denom ** 2
        gp -= np.where(p > clamp, t / pc, 0) / n_vox
        probs.accumulate(g * gp)

    return make_result(loss, [probs], backward)


def one_hot(labels, num_classes=2, dtype=np.float32):
    """(B, D, H, W) integer labels -> (B, K, D, H, W) one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def reduce_sum(x, weights=None):
    """Scalar sum (optionally weighted by a fixed array), for gradient checks."""
    x = as_tensor(x)
    wts = None if weights is None else np.asarray(weights, dtype=x.values.dtype)
    out = np.asarray(x.values.sum() if wts is None else (x.values * wts).sum(), dtype=x.values.dtype)

    def backward(g):
        x.accumulate(g * (np.ones_like(x.values) if wts is None else wts))

    return make_result(out, [x], backward)


__all__ = [
    "DiffTensor", "conv3d", "conv_transpose3d", "batchnorm3d", "relu", "softmax_channels",
    "downsample", "concat_channels", "dice_ce_loss", "one_hot", "reduce_sum",
]
