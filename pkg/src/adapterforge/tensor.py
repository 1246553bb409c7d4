"""Dense float32 tensors with reverse-mode gradients.

Covers exactly the operations the segmentation model needs: 2-D convolution
(cross-correlation, kernel 1 or 3, stride 1 or 2, zero padding), batch
normalization, ReLU, 2x2 max-pool, nearest 2x upsampling, addition and
channel concatenation.  Activations are (batch, channel, height, width)
arrays; parameters may carry any shape.

The graph is taped implicitly: each op returns a Tensor holding a closure
that routes its output gradient to the inputs.  ``backward(loss)`` walks the
tape in reverse topological order.  Parameters with ``requires_grad=False``
never receive a gradient buffer, and their weight-gradient GEMMs are skipped
entirely.

Set ``ADAPTERFORGE_DEBUG=1`` to assert finite values at op boundaries.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError, StateError

DEBUG_NAN = os.environ.get("ADAPTERFORGE_DEBUG", "").strip() not in ("", "0")


def _check_finite(a, where):
    if DEBUG_NAN and not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values after {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def needs_grad(self):
        return self.requires_grad or bool(self._parents)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def copy(self):
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data, parents, backward_fn, where):
    """Wrap an op result, recording the tape edge only when it matters."""
    _check_finite(data, where)
    out = Tensor(data)
    if any(p.needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if t.needs_grad():
        t.grad = g.astype(np.float32, copy=False) if t.grad is None else t.grad + g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss over the recorded graph."""
    if loss._backward is None:
        raise StateError("backward() called without a recorded forward graph")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")

    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is not None:
            node._backward(node.grad)


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights of a 2-D convolution (cross-correlation, zero padding)."""

    weight: Tensor                    # (c_out, c_in, k, k)
    bias: Tensor | None = None        # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        co, ci, k, k2 = self.weight.shape
        if k != k2 or k not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")
        if self.bias is not None and self.bias.shape != (co,):
            raise ShapeError("bias shape must be (c_out,)")

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def kernel(self):
        return self.weight.shape[2]


@dataclass
class BatchNormParams:
    """Per-channel affine normalization with tracked running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=np.float32)
        if self.beta.shape != (c,) or self.running_mean.shape != (c,) or self.running_var.shape != (c,):
            raise ShapeError("batchnorm parameter shapes disagree")
        if self.eps <= 0:
            raise ShapeError("eps must be positive")
        if not (0.0 < self.momentum < 1.0):
            raise ShapeError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ShapeError("running variance must be non-negative")

    @property
    def channels(self):
        return self.gamma.shape[0]


def make_bn(channels, eps=1e-5, momentum=0.1, trainable=True) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels, dtype=np.float32), requires_grad=trainable),
        beta=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=trainable),
        eps=eps,
        momentum=momentum,
    )


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"input has {c} channels, conv expects {p.c_in}")
    k, s, pad = p.kernel, p.stride, p.padding
    ho = (h + 2 * pad - k) // s + 1
    wo = (w + 2 * pad - k) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("convolution output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = kernels.im2col(np.ascontiguousarray(xp), k, s)
    wmat = p.weight.data.reshape(p.c_out, c * k * k)
    out = cols @ wmat.T
    if p.bias is not None:
        out = out + p.bias.data
    y = out.reshape(n, ho, wo, p.c_out).transpose(0, 3, 1, 2)

    weight, bias = p.weight, p.bias

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(-1, p.c_out))
        if weight.needs_grad():
            _accum(weight, (gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.needs_grad():
            _accum(bias, gmat.sum(axis=0))
        if x.needs_grad():
            dcols = np.ascontiguousarray(gmat @ wmat)
            dxp = kernels.col2im(dcols, n, c, xp.shape[2], xp.shape[3], k, s)
            _accum(x, dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(y), parents, grad_fn, "conv2d")


def batchnorm_forward(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"input has {c} channels, batchnorm expects {p.channels}")

    if training:
        m = n * h * w
        if m == 0:
            raise ShapeError("batch statistics undefined for empty batch/spatial dims")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mu
        p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * var
    else:
        mu = p.running_mean
        var = p.running_var

    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    y = p.gamma.data[None, :, None, None] * xhat + p.beta.data[None, :, None, None]
    gamma, beta = p.gamma, p.beta

    def grad_fn(g):
        if beta.needs_grad():
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if gamma.needs_grad():
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.needs_grad():
            return
        gam = gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            dxhat = g * gam
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (dxhat - s1 / m - xhat * s2 / m) * inv[None, :, None, None]
        else:
            dx = g * gam * inv[None, :, None, None]
        _accum(x, dx.astype(np.float32))

    return _make(y.astype(np.float32), (x, gamma, beta), grad_fn, "batchnorm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), grad_fn, "relu")


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    y, idx = kernels.maxpool2x2(x.data)

    def grad_fn(g):
        _accum(x, kernels.maxpool2x2_grad(np.ascontiguousarray(g), idx))

    return _make(y, (x,), grad_fn, "maxpool2x2")


def upsample_nearest2x(x: Tensor) -> Tensor:
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        n, c, h, w = g.shape
        _accum(x, g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)))

    return _make(y, (x,), grad_fn, "upsample_nearest2x")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def grad_fn(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def reduce_sum(x: Tensor) -> Tensor:
    """Scalar sum; the reduction every test loss bottoms out in."""

    def grad_fn(g):
        _accum(x, np.broadcast_to(g, x.shape).astype(np.float32))

    return _make(x.data.sum(dtype=np.float64).astype(np.float32), (x,), grad_fn, "reduce_sum")


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    base = parts[0].shape
    for t in parts[1:]:
        if (t.shape[0],) + t.shape[2:] != (base[0],) + base[2:]:
            raise ShapeError("concat_channels requires matching (n, h, w)")
    splits = np.cumsum([t.shape[1] for t in parts])[:-1]

    def grad_fn(g):
        for t, piece in zip(parts, np.split(g, splits, axis=1)):
            _accum(t, np.ascontiguousarray(piece))

    return _make(np.concatenate([t.data for t in parts], axis=1), tuple(parts), grad_fn, "concat")
