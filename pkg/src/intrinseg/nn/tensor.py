"""Minimal reverse-mode automatic differentiation over numpy arrays.

float32 data stays float32 (the fast training path); every other dtype
is promoted to float64.  Every differentiable op records a closure
that accumulates adjoints into its parents; Tensor.backward() walks the
graph in reverse topological order and then frees it, so a second
backward without a fresh forward raises.
"""

from __future__ import annotations

import os

import numpy as np

# When set, every op asserts its output is finite.  Costs a pass per op.
DEBUG_NAN_CHECK = bool(os.environ.get("ISEG_DEBUG_NAN"))


class GraphError(RuntimeError):
    """Backward called without a recorded forward graph."""


def _check(arr: np.ndarray) -> np.ndarray:
    if DEBUG_NAN_CHECK and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by an op")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        # float32 is preserved (fast training path); everything else is
        # promoted to float64 (precision-first default)
        self.data = arr if arr.dtype == np.float32 else np.asarray(arr, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._freed = False

    # -- graph bookkeeping -------------------------------------------------

    @staticmethod
    def _node(data, parents, backward_fn) -> "Tensor":
        out = Tensor(_check(data))
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        if self.data.ndim != 0:
            raise GraphError(f"backward requires a scalar, got shape {self.shape}")
        if self._freed:
            raise GraphError("graph already freed; run forward again before backward")
        if self._backward_fn is None:
            raise GraphError("backward without a recorded forward graph")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
            node._backward_fn = None
            node._parents = ()
            node._freed = True

    def zero_grad(self):
        self.grad = None

    # -- conveniences ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            a, c = self, other
            return Tensor._node(a.data + c, (a,), lambda g: a._accumulate(g))
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data + b.data,
            (a, b),
            lambda g: (
                a._accumulate(_unbroadcast(g, a.data.shape)) if a.requires_grad else None,
                b._accumulate(_unbroadcast(g, b.data.shape)) if b.requires_grad else None,
            ),
        )

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            a, c = self, other
            return Tensor._node(a.data * c, (a,), lambda g: a._accumulate(g * c))
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data * b.data,
            (a, b),
            lambda g: (
                a._accumulate(_unbroadcast(g * b.data, a.data.shape)) if a.requires_grad else None,
                b._accumulate(_unbroadcast(g * a.data, b.data.shape)) if b.requires_grad else None,
            ),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        return self * (as_tensor(other) ** -1.0)

    def __rtruediv__(self, other):
        return as_tensor(other) * (self ** -1.0)

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data ** exponent
        return Tensor._node(
            out_data,
            (a,),
            lambda g: a._accumulate(g * exponent * a.data ** (exponent - 1.0)),
        )

    # -- reductions and elementwise functions ------------------------------

    def sum(self):
        a = self
        return Tensor._node(
            np.sum(a.data),
            (a,),
            lambda g: a._accumulate(np.broadcast_to(g, a.data.shape).copy()),
        )

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def log(self):
        a = self
        return Tensor._node(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._node(out_data, (a,), lambda g: a._accumulate(g * out_data))

    def reshape(self, *shape):
        a = self
        return Tensor._node(
            a.data.reshape(*shape),
            (a,),
            lambda g: a._accumulate(g.reshape(a.data.shape)),
        )


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._node(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def _channel_axis(arr: np.ndarray) -> int:
    # images are (C, H, W) or batched (N, C, H, W)
    if arr.ndim not in (3, 4):
        raise ValueError(f"expected 3- or 4-d tensor, got shape {arr.shape}")
    return arr.ndim - 3


def softmax_channel(x: Tensor) -> Tensor:
    """Numerically stable softmax over the class/channel axis."""
    x = as_tensor(x)
    ax = _channel_axis(x.data)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=ax, keepdims=True)
        x._accumulate(p * (g - dot))

    return Tensor._node(p, (x,), backward)


def log_softmax_channel(x: Tensor) -> Tensor:
    x = as_tensor(x)
    ax = _channel_axis(x.data)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        x._accumulate(g - p * g.sum(axis=ax, keepdims=True))

    return Tensor._node(out, (x,), backward)


def gather_channel(x: Tensor, labels: np.ndarray) -> Tensor:
    """Select, per pixel, the channel slice named by an integer label map.

    (C, H, W) with labels (H, W) -> (H, W); batched analogue for 4-d.
    """
    x = as_tensor(x)
    labels = np.asarray(labels)
    if x.data.ndim == 3:
        h, w = labels.shape
        iy, ix = np.mgrid[0:h, 0:w]
        idx = (labels, iy, ix)
    else:
        n, _, h, w = x.data.shape
        ib, iy, ix = np.mgrid[0:n, 0:h, 0:w]
        idx = (ib, labels, iy, ix)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[idx] = g  # label indices are unique per pixel
        x._accumulate(dx)

    return Tensor._node(x.data[idx], (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._node(out, (x,), backward)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    spatial = {t.data.shape[:1] + t.data.shape[2:] for t in tensors}
    if len(spatial) != 1:
        raise ValueError(
            "concat requires matching batch/spatial dims, got "
            + ", ".join(str(t.data.shape) for t in tensors)
        )
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (F, C, kh, kw) weights.

    Output spatial dims are floor((in + 2*padding - k) / stride) + 1, which
    for same-style padding equals ceil(in / stride).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4:
        raise ValueError(f"input must be (N, C, H, W), got shape {x.data.shape}")
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ValueError(f"channel mismatch: input has {c}, weights expect {cw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw) strided view
    ho, wo = win.shape[2], win.shape[3]

    # one contiguous im2col copy, shared by forward and both weight/input grads
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )
    w2d = w.data.reshape(f, c * kh * kw)
    out2d = cols @ w2d.T  # (N*Ho*Wo, F)
    out = out2d.reshape(n, ho, wo, f).transpose(0, 3, 1, 2) + b.data[:, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        if b.requires_grad:
            b._accumulate(g2d.sum(axis=0))
        if w.requires_grad:
            w._accumulate((g2d.T @ cols).reshape(f, c, kh, kw))
        if x.requires_grad:
            dcols = (g2d @ w2d).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j]
                    )
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return Tensor._node(out, (x, w, b), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization with learned scale and shift.

    Training mode uses batch statistics (batch >= 2 required) and updates
    the running buffers in place; eval mode reads the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"input must be (N, C, H, W), got shape {x.data.shape}")
    n = x.data.shape[0]
    cshape = (1, -1, 1, 1)

    if training:
        if n < 2:
            raise ValueError("training-mode batch norm requires batch >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(cshape)) * inv_std.reshape(cshape)
    out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(cshape)
            if training:
                m = x.data.size // x.data.shape[1]
                sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(cshape)
                sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(cshape)
                dx = (inv_std.reshape(cshape) / m) * (m * dxhat - sum_d - xhat * sum_dx)
            else:
                dx = dxhat * inv_std.reshape(cshape)
            x._accumulate(dx)

    return Tensor._node(out, (x, gamma, beta), backward)
