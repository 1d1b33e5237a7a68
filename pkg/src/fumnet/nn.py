"""Layers and fused differentiable kernels built on :mod:`fumnet.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, make_result, relu

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- initialisation ---------------------------------------------------------
def kaiming_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Normal(0, sqrt(2 / fan_in)) samples, as a trainable tensor."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def dilation_for_layer(k: int, layer: int) -> int:
    """Dilation of the `layer`-th (1-based) causal layer with kernel size `k`."""
    if k < 2 or layer < 1:
        raise ValueError(f"need k >= 2 and layer >= 1, got k={k}, layer={layer}")
    return k ** (layer - 1)


# -- fused kernels ------------------------------------------------------------
def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (B, C, h+2, w+2) -> (B, C*9, h*w), rows ordered (channel, dy, dx)
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 3, 3, h, w), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * 9, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (batch, ch, H, W), got {x.shape}")
    b, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape != (o, c, 3, 3):
        raise ShapeError(f"conv2d: input has {c} channels, weight is {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    wmat = weight.data.reshape(o, c * 9)
    y = np.matmul(wmat, cols)
    y += bias.data[:, None]
    out = y.reshape(b, o, h, w)
    need_dx = x.requires_grad

    def bw(g):
        g3 = g.reshape(b, o, h * w)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g3.sum(axis=(0, 2))
        if not need_dx:
            return None, gw, gb
        dcols = np.matmul(wmat.T, g3).reshape(b, c, 3, 3, h, w)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
        return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1]), gw, gb

    return make_result(out, "conv2d", (x, weight, bias), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max over the last two axes.

    The gradient goes to the first maximal element of each window in
    row-major scan order.
    """
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    xd = x.data
    corners = [(0, 0), (0, 1), (1, 0), (1, 1)]
    views = [xd[..., i::2, j::2] for i, j in corners]
    y = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def bw(g):
        gx = np.zeros_like(xd)
        taken = np.zeros(y.shape, dtype=bool)
        for (i, j), v in zip(corners, views):
            hit = (v == y) & ~taken
            taken |= hit
            gx[..., i::2, j::2] = g * hit
        return (gx,)

    return make_result(y, "maxpool2x2", (x,), bw)


def batchnorm2d_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS):
    """Per-channel standardisation with batch statistics over (batch, H, W).

    Returns the output tensor plus the batch mean and biased variance.
    """
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes)
    xc = x.data - mu[None, :, None, None]
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    g_ = gamma.data[None, :, None, None]
    y = xhat * g_ + beta.data[None, :, None, None]

    def bw(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        dxhat = g * g_
        dx = (inv[None, :, None, None] / n) * (
            n * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
        return dx, dgamma, dbeta

    return make_result(y.astype(x.dtype, copy=False), "batchnorm2d", (x, gamma, beta), bw), mu, var


def batchnorm2d_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
                     eps: float = BN_EPS) -> Tensor:
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    scale = (gamma.data * inv)[None, :, None, None]

    def bw(g):
        return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(y.astype(x.dtype, copy=False), "batchnorm2d_eval", (x, gamma, beta), bw)


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """Causal dilated convolution over sequences shaped (..., steps, features).

    Equivalent to left-padding with (k-1)*dilation zero steps: tap j of the
    kernel reads the input (k-1-j)*dilation steps in the past, so the last tap
    sees the current step. All taps are applied in one matrix product and the
    per-tap results are then shifted into place.
    """
    o, f, k = weight.shape
    if x.ndim < 2 or x.shape[-1] != f:
        raise ShapeError(f"causal conv expects (..., steps, {f}) input, got {x.shape}")
    lead = x.shape[:-2]
    t = x.shape[-2]
    x2 = x.data.reshape(-1, f)
    b = x2.shape[0] // t
    wcat = np.ascontiguousarray(weight.data.transpose(1, 2, 0).reshape(f, k * o))  # (f, k*o)
    taps = [(j, (k - 1 - j) * dilation) for j in range(k) if (k - 1 - j) * dilation < t]
    prod = (x2 @ wcat).reshape(b, t, k, o)
    y = np.empty((b, t, o), dtype=x2.dtype)
    y[...] = bias.data
    for j, shift in taps:
        y[:, shift:] += prod[:, : t - shift, j]

    def bw(g):
        g = g.reshape(b, t, o)
        gcat = np.zeros((b, t, k, o), dtype=g.dtype)
        for j, shift in taps:
            gcat[:, : t - shift, j] = g[:, shift:]
        gcat = gcat.reshape(b * t, k * o)
        gx = (gcat @ wcat.T).reshape(x.shape)
        gw = (x2.T @ gcat).reshape(f, k, o).transpose(2, 0, 1)
        return gx, np.ascontiguousarray(gw), g.sum(axis=(0, 1))

    return make_result(y.reshape(*lead, t, o), "causal_conv1d", (x, weight, bias), bw)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias over the last axis of `x`."""
    out_f, in_f = weight.shape
    if x.shape[-1] != in_f:
        raise ShapeError(f"linear expects {in_f} input features, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, in_f)
    wd = weight.data
    y = (x2 @ wd.T + bias.data).reshape(*lead, out_f)

    def bw(g):
        g2 = g.reshape(-1, out_f)
        return (g2 @ wd).reshape(x.shape), g2.T @ x2, g2.sum(axis=0)

    return make_result(y, "affine", (x, weight, bias), bw)


def weight_norm(direction: Tensor, scale: Tensor) -> Tensor:
    """Effective weight rows scale[i] * direction[i] / ||direction[i]||."""
    v = direction.data
    norm = np.sqrt((v * v).sum(axis=1))
    vhat = v / norm[:, None]
    w = scale.data[:, None] * vhat

    def bw(g):
        proj = (g * vhat).sum(axis=1)
        dv = (scale.data / norm)[:, None] * (g - proj[:, None] * vhat)
        return dv, proj

    return make_result(w, "weight_norm", (direction, scale), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows.

    Accepts a single logit vector with an int label, or a (batch, N) matrix
    with one label per row. Labels are 0-based.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = z2.shape[1]
    if lab.shape[0] != z2.shape[0]:
        raise ShapeError(f"{z2.shape[0]} logit rows but {lab.shape[0]} labels")
    if np.any(lab < 0) or np.any(lab >= n):
        raise ValueError(f"labels must lie in [0, {n}), got {lab.tolist()}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    loss = np.asarray((logsum - shifted[rows, lab]).mean(), dtype=z.dtype)

    def bw(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, lab] -= 1
        p *= g / z2.shape[0]
        return (p[0] if single else p,)

    return make_result(loss, "softmax_cross_entropy", (logits,), bw)


# -- layer containers -----------------------------------------------------------
class Module:
    """Parameter container with train/eval mode, walked by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and not value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, Tensor]:
        """Every persisted tensor: parameters then buffers."""
        return dict(self.named_parameters()) | dict(self.named_buffers())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.weight = kaiming_init((out_ch, in_ch, 3, 3), in_ch * 9, rng)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, ch: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = Tensor(np.zeros(ch))
        self.running_var = Tensor(np.ones(ch))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] == 0:
            raise ShapeError("batchnorm on an empty batch")
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batchnorm over {self.gamma.shape[0]} channels got {x.shape}")
        if not self.training:
            return batchnorm2d_eval(x, self.gamma, self.beta, self.running_mean.data,
                                    self.running_var.data, self.eps)
        out, mu, var = batchnorm2d_train(x, self.gamma, self.beta, self.eps)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (n / max(n - 1, 1))
        m = self.momentum
        self.running_mean.data = ((1 - m) * self.running_mean.data + m * mu).astype(mu.dtype)
        self.running_var.data = ((1 - m) * self.running_var.data + m * unbiased).astype(mu.dtype)
        return out


def batchnorm2d_forward(layer: BatchNorm2d, x: Tensor, mode: str) -> Tensor:
    layer.train(mode == "train")
    return layer(x)


class Linear(Module):
    """Fully connected layer, optionally weight-normalised.

    With weight norm the stored parameters are a direction matrix and a per-row
    scale; the scale starts at the row norms so the initial effective weight is
    the Kaiming sample itself.
    """

    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, weight_norm: bool = False):
        self.weight_norm_enabled = weight_norm
        w = kaiming_init((out_f, in_f), in_f, rng)
        if weight_norm:
            self.weight_direction = w
            self.weight_scale = Tensor(np.sqrt((w.data ** 2).sum(axis=1)), requires_grad=True)
        else:
            self.weight = w
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def effective_weight(self) -> Tensor:
        if self.weight_norm_enabled:
            return weight_norm(self.weight_direction, self.weight_scale)
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        return affine(x, self.effective_weight(), self.bias)


class CausalConv1d(Module):
    def __init__(self, in_f: int, out_f: int, kernel_size: int, dilation: int,
                 rng: np.random.Generator):
        if kernel_size < 1 or dilation < 1:
            raise ValueError("kernel_size and dilation must be positive")
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.weight = kaiming_init((out_f, in_f, kernel_size), in_f * kernel_size, rng)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    @property
    def left_padding(self) -> int:
        return (self.kernel_size - 1) * self.dilation

    def forward(self, x: Tensor) -> Tensor:
        return causal_conv1d(x, self.weight, self.bias, self.dilation)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)
