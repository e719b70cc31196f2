"""Differentiable neural layers: convolution, transposed convolution,
max pooling, batch normalization, ReLU and sigmoid.

All ops use channels-last layout ([N, H, W, C]) and are differentiable with
respect to their inputs and parameters. Convolution is cross-correlation
(no kernel flip). Accumulation orders are fixed so repeated runs are
bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Node,
    PrecisionError,
    ShapeError,
    accumulate_grad,
    make_op,
)


class DegenerateBatchError(ValueError):
    """Batch statistics requested over a single-element population."""


@dataclass
class ConvParams:
    """Convolution weights and geometry.

    ``kernel`` has shape [k_h, k_w, in_channels, out_channels]; parameter
    count is k_h*k_w*cin*cout + cout when the bias is present.
    """

    kernel: Node
    bias: Node | None = None
    stride: int = 1
    padding: str = "same"  # "same" (stride 1 only) or "valid"


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state.

    gamma/beta are trainable ([C] each, 2*C parameters); the running
    statistics are buffers updated by exponential moving average in
    training mode and consumed in inference mode.
    """

    gamma: Node
    beta: Node
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99


def _check_input(x: Node, kernel: Node) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"expected [N,H,W,C] input, got shape {x.shape}")
    if x.value.dtype != kernel.value.dtype:
        raise PrecisionError("input and kernel precision differ")


def conv2d(x: Node, p: ConvParams) -> Node:
    """2-D cross-correlation plus bias.

    Same padding (stride 1 only) preserves the spatial extents; valid
    padding shrinks them by k-1 before the stride is applied.
    """
    k = p.kernel.data
    if k.ndim != 4:
        raise ShapeError(f"kernel must be [kh,kw,cin,cout], got {k.shape}")
    _check_input(x, p.kernel)
    kh, kw, cin, cout = k.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    s = p.stride
    if p.padding == "same":
        if s != 1:
            raise ShapeError("same padding requires stride 1")
        ph0, ph1 = (kh - 1) // 2, kh - 1 - (kh - 1) // 2
        pw0, pw1 = (kw - 1) // 2, kw - 1 - (kw - 1) // 2
    elif p.padding == "valid":
        ph0 = ph1 = pw0 = pw1 = 0
    else:
        raise ValueError(f"unknown padding {p.padding!r}")

    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    else:
        xp = x.data
    hp, wp = h + ph0 + ph1, w + pw0 + pw1
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1

    bias = p.bias
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    if kh == 1 and kw == 1 and s == 1:
        out = (xp.reshape(-1, cin) @ k.reshape(cin, cout)).reshape(n, ho, wo, cout)
    else:
        acc = None
        for dh in range(kh):
            for dw in range(kw):
                sl = xp[:, dh:dh + s * ho:s, dw:dw + s * wo:s, :]
                tap = sl.reshape(-1, cin) @ k[dh, dw]
                if acc is None:
                    acc = tap
                else:
                    acc += tap
        out = acc.reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data

    def bk(g):
        gf = g.reshape(-1, cout)
        if p.kernel.requires_grad:
            gk = np.empty_like(k)
            for dh in range(kh):
                for dw in range(kw):
                    sl = xp[:, dh:dh + s * ho:s, dw:dw + s * wo:s, :]
                    gk[dh, dw] = sl.reshape(-1, cin).T @ gf
            accumulate_grad(p.kernel, gk, owned=True)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 1, 2)), owned=True)
        if x.requires_grad:
            gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            for dh in range(kh):
                for dw in range(kw):
                    gxp[:, dh:dh + s * ho:s, dw:dw + s * wo:s, :] += (
                        gf @ k[dh, dw].T
                    ).reshape(n, ho, wo, cin)
            if ph0 or ph1 or pw0 or pw1:
                gxp = gxp[:, ph0:hp - ph1, pw0:wp - pw1, :]
            accumulate_grad(x, gxp, owned=True)

    parents = (x, p.kernel) if bias is None else (x, p.kernel, bias)
    return make_op(out, "conv2d", parents, bk)


def conv_transpose2d(x: Node, p: ConvParams) -> Node:
    """2x upsampling via a 2x2 stride-2 transposed convolution.

    This is the adjoint of a stride-2 valid 2x2 cross-correlation; since the
    stride equals the kernel size, every output cell receives exactly one
    kernel-tap contribution.
    """
    k = p.kernel.data
    if k.ndim != 4 or k.shape[0] != 2 or k.shape[1] != 2 or p.stride != 2:
        raise ShapeError("transposed conv supports only 2x2 kernels with stride 2")
    _check_input(x, p.kernel)
    _, _, cin, cout = k.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    bias = p.bias
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    xf = x.data.reshape(-1, cin)
    out = np.empty((n, 2 * h, 2 * w, cout), dtype=x.data.dtype)
    for dh in range(2):
        for dw in range(2):
            out[:, dh::2, dw::2, :] = (xf @ k[dh, dw]).reshape(n, h, w, cout)
    if bias is not None:
        out = out + bias.data

    def bk(g):
        if p.kernel.requires_grad:
            gk = np.empty_like(k)
            for dh in range(2):
                for dw in range(2):
                    gk[dh, dw] = xf.T @ g[:, dh::2, dw::2, :].reshape(-1, cout)
            accumulate_grad(p.kernel, gk, owned=True)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 1, 2)), owned=True)
        if x.requires_grad:
            gx = np.zeros((n * h * w, cin), dtype=g.dtype)
            for dh in range(2):
                for dw in range(2):
                    gx += g[:, dh::2, dw::2, :].reshape(-1, cout) @ k[dh, dw].T
            accumulate_grad(x, gx.reshape(n, h, w, cin), owned=True)

    parents = (x, p.kernel) if bias is None else (x, p.kernel, bias)
    return make_op(out, "conv_transpose2d", parents, bk)


def maxpool2d(x: Node) -> Node:
    """2x2 max pooling with stride 2.

    Backward routes the gradient to the argmax of each window only; ties go
    to the first position in row-major scan order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"expected [N,H,W,C] input, got shape {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = (
        x.data.reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h2, w2, c, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bk(g):
        gw = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, h2, w2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, h, w, c)
        )
        accumulate_grad(x, gx, owned=True)

    return make_op(out, "maxpool2d", (x,), bk)


def batchnorm(x: Node, p: BatchNormParams, mode: str) -> Node:
    """Per-channel normalization over the batch and spatial axes.

    Training mode standardizes with the (biased) batch statistics and
    updates the running statistics in place; inference mode uses the
    running statistics.
    """
    if mode not in ("training", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    channels = x.shape[-1]
    if p.gamma.shape != (channels,) or p.beta.shape != (channels,):
        raise ShapeError(f"gamma/beta must have shape ({channels},)")
    axes = tuple(range(x.data.ndim - 1))
    training = mode == "training"
    if training:
        m = int(np.prod(x.shape[:-1]))
        if m <= 1:
            raise DegenerateBatchError("batch statistics need more than one element per channel")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean
        var = np.mean(centered * centered, axis=axes)
        p.running_mean *= p.momentum
        p.running_mean += (1.0 - p.momentum) * mean
        p.running_var *= p.momentum
        p.running_var += (1.0 - p.momentum) * var
    else:
        centered = x.data - p.running_mean
        var = p.running_var
    inv = 1.0 / np.sqrt(var + x.value.dtype.type(p.epsilon))
    xhat = centered * inv
    out = xhat * p.gamma.data + p.beta.data

    def bk(g):
        # dL/dgamma and dL/dbeta double as the per-channel sums that the
        # input gradient needs, so each is reduced once.
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        accumulate_grad(p.gamma, dgamma)
        accumulate_grad(p.beta, dbeta)
        if x.requires_grad:
            if training:
                mm = x.value.dtype.type(1.0 / np.prod(x.shape[:-1]))
                gx = (inv * p.gamma.data) * (g - dbeta * mm - xhat * (dgamma * mm))
            else:
                gx = g * (inv * p.gamma.data)
            accumulate_grad(x, gx, owned=True)

    return make_op(out, "batchnorm", (x, p.gamma, p.beta), bk)


def relu(x: Node) -> Node:
    out = np.maximum(x.data, 0)

    def bk(g):
        accumulate_grad(x, g * (x.data > 0), owned=True)

    return make_op(out, "relu", (x,), bk)


def sigmoid(x: Node) -> Node:
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def bk(g):
        accumulate_grad(x, g * out * (1.0 - out), owned=True)

    return make_op(out, "sigmoid", (x,), bk)


def conv_param_count(kernel_size: int, rank: int, cin: int, cout: int, bias: bool = True) -> int:
    """Closed-form trainable parameter count of one convolution."""
    return kernel_size**rank * cin * cout + (cout if bias else 0)


def batchnorm_param_count(channels: int) -> int:
    """Closed-form trainable parameter count of one batchnorm (gamma, beta)."""
    return 2 * channels
