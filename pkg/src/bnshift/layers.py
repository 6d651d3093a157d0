"""Convolution, linear, activation, and pooling layers on the autodiff core.

Convolution follows the cross-correlation convention and is lowered to a
single BLAS matmul per call via im2col. Weight init is He-uniform over the
fan-in, suitable for the ReLU stacks built from these layers.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor

__all__ = [
    "Conv2D",
    "Linear",
    "conv2d",
    "linear",
    "relu",
    "sigmoid",
    "softmax",
    "global_avg_pool",
    "avg_pool2d",
    "top_t_pool",
    "attention_pool",
    "he_uniform",
]


def he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2D:
    """2-d cross-correlation layer with optional bias."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, rng=None):
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        rng = rng if rng is not None else np.random.default_rng()
        kh = kw = int(kernel_size)
        fan_in = in_channels * kh * kw
        self.weight = Tensor(
            he_uniform(rng, (out_channels, in_channels, kh, kw), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        self.stride = int(stride)
        self.padding = int(padding)

    def __call__(self, x):
        return conv2d(x, self)

    def parameters(self):
        return [("weight", self.weight)] + ([("bias", self.bias)] if self.bias else [])


class Linear:
    """Fully connected layer: x @ W^T + b."""

    def __init__(self, in_features, out_features, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        self.weight = Tensor(
            he_uniform(rng, (out_features, in_features), in_features), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x):
        return linear(x, self)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )
    return cols, ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, c, hp, wp))
    dwin = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dwin[:, :, :, :, i, j]
            )
    return dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp


def conv2d(x, layer):
    """Cross-correlate a [N, C, H, W] tensor with layer weights."""
    w = layer.weight
    out_ch, in_ch, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != in_ch:
        raise ShapeError(f"conv2d: expected [N,{in_ch},H,W], got {x.shape}")
    if x.shape[2] + 2 * layer.padding < kh or x.shape[3] + 2 * layer.padding < kw:
        raise ShapeError("conv2d: spatial dims smaller than kernel after padding")
    stride, padding = layer.stride, layer.padding
    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(out_ch, -1)
    out = cols @ wmat.T
    if layer.bias is not None:
        out += layer.bias.data
    out = out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2)
    x_shape = x.shape
    bias = layer.bias

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_ch)
        dx = _col2im(gmat @ wmat, x_shape, kh, kw, stride, padding, ho, wo)
        # frozen conv weights skip the (expensive) weight-gradient matmul
        dw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        if bias is None:
            return (dx, dw)
        return (dx, dw, gmat.sum(axis=0) if bias.requires_grad else None)

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, bw)


def linear(x, layer):
    w, b = layer.weight, layer.bias
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: expected [N,{w.shape[1]}], got {x.shape}")
    out = x.data @ w.data.T + b.data

    def bw(g):
        return (g @ w.data, g.T @ x.data, g.sum(axis=0))

    return Tensor.from_op(out, (x, w, b), bw)


# -- activations ------------------------------------------------------------


def relu(x):
    mask = (x.data > 0).astype(np.float64)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x):
    """Softmax over the last axis; output rows sum to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor.from_op(out, (x,), bw)


# -- pooling ------------------------------------------------------------------


def global_avg_pool(x):
    """Per-channel spatial mean: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return Tensor.from_op(out, (x,), bw)


def avg_pool2d(x):
    """2x2 average pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d: odd spatial dims {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return Tensor.from_op(out, (x,), bw)


def top_t_pool(maps, t):
    """Mean of the ceil(t*H*W) largest values per class map.

    Ties are resolved by row-major scan order, which keeps the selection
    (and therefore the backward scatter) deterministic.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError(f"top_t_pool: t must be in (0, 1], got {t}")
    n, cls, h, w = maps.shape
    k = math.ceil(t * h * w)
    flat = maps.data.reshape(n, cls, h * w)
    order = np.argsort(-flat, axis=-1, kind="stable")[:, :, :k]
    picked = np.take_along_axis(flat, order, axis=-1)
    out = picked.mean(axis=-1)

    def bw(g):
        dflat = np.zeros((n, cls, h * w))
        np.put_along_axis(
            dflat, order, np.broadcast_to(g[:, :, None] / k, order.shape), axis=-1
        )
        return (dflat.reshape(n, cls, h, w),)

    return Tensor.from_op(out, (maps,), bw)


def attention_pool(features, weights):
    """Weighted sum over the patch axis: [N, K, F] x [N, K] -> [N, F]."""
    if features.shape[:2] != weights.shape:
        raise ShapeError(
            f"attention_pool: {features.shape} incompatible with {weights.shape}"
        )
    out = np.einsum("nkf,nk->nf", features.data, weights.data)

    def bw(g):
        return (
            weights.data[:, :, None] * g[:, None, :],
            np.einsum("nkf,nf->nk", features.data, g),
        )

    return Tensor.from_op(out, (features, weights), bw)
