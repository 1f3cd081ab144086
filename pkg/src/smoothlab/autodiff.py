"""A small reverse-mode autodiff over (batch, channel, height, width) arrays.

Only what the smoothing network needs: dilated/strided 3x3 convolution, its
transpose, per-sample channel normalization, ReLU and addition. Values are
float64; each op records a closure that pushes its output gradient to its
parents.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (default ones) to every tensor this one depends on.

        Gradients are recomputed from scratch on every call.
        """
        order = topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if grad is None else np.array(grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"gradient shape {self.grad.shape} != value shape {self.value.shape}")
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- raw convolution kernels --------------------------------------------------------

def conv_output_size(size: int, stride: int, dilation: int, pad: int, k: int = 3) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _taps(k, dilation, stride, ho, wo):
    for ky in range(k):
        for kx in range(k):
            ys = slice(ky * dilation, ky * dilation + stride * (ho - 1) + 1, stride)
            xs = slice(kx * dilation, kx * dilation + stride * (wo - 1) + 1, stride)
            yield ky, kx, ys, xs


def conv2d_raw(x, w, stride=1, dilation=1, pad=None):
    """Zero-padded cross-correlation; pad defaults to dilation (size-preserving)."""
    n, ci, H, W = x.shape
    co, ci_w, k, _ = w.shape
    if ci != ci_w:
        raise ValueError(f"input has {ci} channels, kernel expects {ci_w}")
    pad = dilation * (k // 2) if pad is None else pad
    ho = conv_output_size(H, stride, dilation, pad, k)
    wo = conv_output_size(W, stride, dilation, pad, k)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, co, ho * wo))
    for ky, kx, ys, xs in _taps(k, dilation, stride, ho, wo):
        patch = xp[:, :, ys, xs].reshape(n, ci, ho * wo)
        out += np.matmul(w[:, :, ky, kx], patch)
    return out.reshape(n, co, ho, wo)


def conv2d_grad_input(g, w, in_shape, stride=1, dilation=1, pad=None):
    n, ci, H, W = in_shape
    co, _, k, _ = w.shape
    pad = dilation * (k // 2) if pad is None else pad
    ho, wo = g.shape[2], g.shape[3]
    gflat = g.reshape(n, co, ho * wo)
    gxp = np.zeros((n, ci, H + 2 * pad, W + 2 * pad))
    for ky, kx, ys, xs in _taps(k, dilation, stride, ho, wo):
        gxp[:, :, ys, xs] += np.matmul(w[:, :, ky, kx].T, gflat).reshape(n, ci, ho, wo)
    return gxp[:, :, pad:pad + H, pad:pad + W]


def conv2d_grad_weight(x, g, k=3, stride=1, dilation=1, pad=None):
    n, ci, H, W = x.shape
    co = g.shape[1]
    pad = dilation * (k // 2) if pad is None else pad
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gflat = g.reshape(n, co, ho * wo)
    gw = np.zeros((co, ci, k, k))
    for ky, kx, ys, xs in _taps(k, dilation, stride, ho, wo):
        patch = xp[:, :, ys, xs].reshape(n, ci, ho * wo)
        gw[:, :, ky, kx] = np.einsum("nop,nip->oi", gflat, patch)
    return gw


# -- differentiable ops ---------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, dilation=1) -> Tensor:
    out = conv2d_raw(x.value, w.value, stride, dilation)
    if b is not None:
        out += b.value[None, :, None, None]

    def backward(g):
        if x.requires_grad or x.parents:
            x._accumulate(conv2d_grad_input(g, w.value, x.shape, stride, dilation))
        w._accumulate(conv2d_grad_weight(x.value, g, w.shape[2], stride, dilation))
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=2) -> Tensor:
    """Adjoint of a stride-``stride`` pad-1 conv; doubles H and W for stride 2.

    ``w`` has shape (in_channels, out_channels, 3, 3), i.e. the weight of the
    convolution this op transposes.
    """
    n, ci, H, W = x.shape
    co = w.shape[1]
    out_shape = (n, co, H * stride, W * stride)
    out = conv2d_grad_input(x.value, w.value, out_shape, stride, 1, 1)
    if b is not None:
        out = out + b.value[None, :, None, None]

    def backward(g):
        if x.requires_grad or x.parents:
            x._accumulate(conv2d_raw(g, w.value, stride, 1, 1))
        w._accumulate(conv2d_grad_weight(g, x.value, w.shape[2], stride, 1, 1))
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    active = x.value > 0

    def backward(g):
        x._accumulate(np.where(active, g, 0.0))

    return Tensor(np.where(active, x.value, 0.0), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor(a.value + b.value, (a, b), backward)


VAR_FLOOR = 1e-5


def channel_norm(x: Tensor, gain: Tensor, shift: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, decay: float = 0.99,
                 count: np.ndarray | None = None) -> Tensor:
    """Per-sample, per-channel spatial normalization with learned gain/shift.

    Training mode standardizes with the sample's own statistics (variance
    floored at VAR_FLOOR) and folds them into the running averages in place;
    inference mode uses the running averages.

    With a step ``count`` (shape (1,), updated in place) the averaging rate
    is min(decay, t/(t+1)): a plain mean over the first 1/(1-decay) steps,
    then an exponential average. Without it the rate is always ``decay``.
    """
    v = x.value
    if training:
        mu = v.mean(axis=(2, 3), keepdims=True)
        var = v.var(axis=(2, 3), keepdims=True)
        floored = var < VAR_FLOOR
        sd = np.sqrt(np.maximum(var, VAR_FLOOR))
        rate = decay
        if count is not None:
            rate = min(decay, count[0] / (count[0] + 1.0))
            count += 1.0
        running_mean *= rate
        running_mean += (1.0 - rate) * mu.mean(axis=(0, 2, 3))
        running_var *= rate
        running_var += (1.0 - rate) * var.mean(axis=(0, 2, 3))
    else:
        mu = running_mean[None, :, None, None]
        sd = np.sqrt(np.maximum(running_var, VAR_FLOOR))[None, :, None, None]
    y = (v - mu) / sd
    out = gain.value[None, :, None, None] * y + shift.value[None, :, None, None]

    def backward(g):
        gain._accumulate(np.sum(g * y, axis=(0, 2, 3)))
        shift._accumulate(g.sum(axis=(0, 2, 3)))
        gy = g * gain.value[None, :, None, None]
        if training:
            gy_mean = gy.mean(axis=(2, 3), keepdims=True)
            gyy_mean = np.where(floored, 0.0, (gy * y).mean(axis=(2, 3), keepdims=True))
            gx = (gy - gy_mean - y * gyy_mean) / sd
        else:
            gx = gy / sd
        x._accumulate(gx)

    return Tensor(out, (x, gain, shift), backward)
