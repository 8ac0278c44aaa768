"""Reverse-mode autodiff tape over numpy arrays.

A :class:`Tensor` node stores its forward value, a closure that propagates the
incoming gradient to its parents, and the parent references themselves.
``backward`` walks the graph in reverse topological order exactly once.
Gradients of binary ops are reduced over broadcast axes so scalar and
per-channel parameters compose naturally with rank-4 feature maps.

Convolution forward passes unfold the input once (im2col) and keep the column
matrix on the input node; every convolution reading the same node, and its own
backward pass, reuse it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .dtypes import EPS, as_default, default_dtype
from .errors import ContractViolation, UnsupportedConfig


class Tensor:
    __slots__ = ("data", "grad", "_backward", "_prev", "_cols")

    def __init__(self, data, prev: tuple = ()):
        self.data = as_default(data) if not isinstance(data, np.ndarray) else data
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._prev = prev
        self._cols: np.ndarray | None = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def invalidate_cache(self) -> None:
        """Drop the cached im2col matrix after mutating ``data`` in place."""
        self._cols = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def back(g):
            _accum(self, _unbroadcast(g, self.data.shape))
            _accum(other, _unbroadcast(g, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: _accum(self, -g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def back(g):
            _accum(self, _unbroadcast(g * other.data, self.data.shape))
            _accum(other, _unbroadcast(g * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other))

        def back(g):
            _accum(self, _unbroadcast(g / other.data, self.data.shape))
            _accum(other, _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        out._backward = back
        return out

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise ContractViolation("only scalar exponents are supported")
        out = Tensor(self.data**exponent, (self,))
        out._backward = lambda g: _accum(self, g * exponent * self.data ** (exponent - 1))
        return out

    def sqrt(self):
        root = np.sqrt(self.data)
        out = Tensor(root, (self,))
        out._backward = lambda g: _accum(self, g / (2.0 * root))
        return out

    # -- nonlinearities ----------------------------------------------------

    def relu(self):
        out = Tensor(np.maximum(self.data, 0), (self,))
        out._backward = lambda g: _accum(self, g * (self.data > 0))
        return out

    def sigmoid(self):
        s = kernels.sigmoid(self.data)
        out = Tensor(s, (self,))
        out._backward = lambda g: _accum(self, g * s * (1.0 - s))
        return out

    def softplus(self):
        out = Tensor(kernels.softplus(self.data), (self,))
        out._backward = lambda g: _accum(self, g * kernels.sigmoid(self.data))
        return out

    # -- reductions --------------------------------------------------------

    def sum(self):
        # Scalar reductions accumulate in float64 so that finite-difference
        # probes see only the perturbed terms, not global rounding noise.
        out = Tensor(np.asarray(self.data.sum(dtype=np.float64)), (self,))
        out._backward = lambda g: _accum(self, np.broadcast_to(g, self.data.shape))
        return out

    def mean(self):
        n = self.data.size
        out = Tensor(np.asarray(self.data.mean(dtype=np.float64)), (self,))
        out._backward = lambda g: _accum(self, np.broadcast_to(g / n, self.data.shape))
        return out

    def item(self) -> float:
        return float(self.data)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- structured ops ---------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Differentiable convolution; same supported geometries as the kernels."""
    weights = kernels.ConvWeights(w.data, None)
    kernels._check_conv_config(x.data, weights, padding, 1)
    b, c, h, wd = x.data.shape
    o = w.data.shape[0]

    if weights.kernel_h == 1:
        y = np.tensordot(x.data, w.data[:, :, 0, 0], axes=([1], [1]))  # (B,H,W,O)
        cols = None
    else:
        if x._cols is None:
            x._cols = kernels.im2col3x3(x.data)
        cols = x._cols
        y = (cols @ w.data.reshape(o, -1).T).reshape(b, h, wd, o)
    if bias is not None:
        y = y + bias.data
    out_data = np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    parents = (x, w) if bias is None else (x, w, bias)
    out = Tensor(out_data, parents)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if cols is None:
            _accum(w, np.tensordot(gmat, x.data.reshape(b, c, -1).transpose(0, 2, 1).reshape(-1, c),
                                   axes=([0], [0]))[:, :, None, None])
            gx = (gmat @ w.data[:, :, 0, 0]).reshape(b, h, wd, c).transpose(0, 3, 1, 2)
        else:
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
            # input gradient is the correlation with the flipped, transposed
            # kernel; reusing the im2col+GEMM path beats a scatter-add
            flipped = np.ascontiguousarray(
                w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).reshape(c, -1)
            gcols = kernels.im2col3x3(np.ascontiguousarray(g))
            gx = (gcols @ flipped.T).reshape(b, h, wd, c).transpose(0, 3, 1, 2)
        _accum(x, gx)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    out._backward = back
    return out


def group_mean(x: Tensor, num_groups: int) -> Tensor:
    """Mean of each channel group over channels and space; returns ``(B, G)``."""
    b, c = x.data.shape[:2]
    if c % num_groups != 0:
        raise ContractViolation(f"{c} channels not divisible into {num_groups} groups")
    n = x.data.size // (b * num_groups)
    out = Tensor(x.data.reshape(b, num_groups, -1).mean(axis=2), (x,))

    def back(g):
        expanded = np.repeat(g / n, n, axis=1).reshape(x.data.shape)
        _accum(x, expanded)

    out._backward = back
    return out


def masked_group_mean(x: Tensor, mask: np.ndarray, num_groups: int) -> Tensor:
    """Group mean over mask-selected pixels only (mask is a constant 0/1 map).

    Used by the per-active-pixel normalizer ablations. With no active pixel
    in a batch element the mean degenerates to zero.
    """
    b, c, h, w = x.data.shape
    if c % num_groups != 0:
        raise ContractViolation(f"{c} channels not divisible into {num_groups} groups")
    m = mask.reshape(b, 1, h, w).astype(x.data.dtype)
    per = c // num_groups
    denom = np.maximum(m.sum(axis=(1, 2, 3)) * per, 1.0).astype(x.data.dtype)  # (B,)
    summed = (x.data * m).reshape(b, num_groups, -1).sum(axis=2)
    out = Tensor(summed / denom[:, None], (x,))

    def back(g):
        scale = np.repeat(g / denom[:, None], per, axis=1)  # (B, C)
        _accum(x, scale[:, :, None, None] * m)

    out._backward = back
    return out


def masked_channel_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Per-channel mean over mask-selected pixels of all batch elements.

    Returns a ``(1, C, 1, 1)`` tensor (batch-norm style statistics).
    """
    b, c, h, w = x.data.shape
    m = mask.reshape(b, 1, h, w).astype(x.data.dtype)
    denom = max(float(m.sum()), 1.0)
    summed = (x.data * m).sum(axis=(0, 2, 3))
    out = Tensor((summed / denom).reshape(1, c, 1, 1), (x,))

    def back(g):
        _accum(x, (g.reshape(1, c, 1, 1) / denom) * m)

    out._backward = back
    return out


def repeat_groups(stats: Tensor, channels: int) -> Tensor:
    """Expand ``(B, G)`` group statistics to a broadcastable ``(B, C, 1, 1)``."""
    b, g = stats.data.shape
    if channels % g != 0:
        raise ContractViolation(f"{channels} channels not divisible into {g} groups")
    per = channels // g
    out = Tensor(np.repeat(stats.data, per, axis=1).reshape(b, channels, 1, 1), (stats,))

    def back(grad):
        _accum(stats, grad.reshape(b, g, per).sum(axis=2))

    out._backward = back
    return out


# -- graph traversal --------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into every reachable node's ``grad``."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. The
    default step is 1e-3, sized for float32 forward noise; pass a smaller step
    when running under float64. Relative error is |a-b| / max(1e-6, |a|, |b|).
    """
    if h is None:
        h = 1e-3 if default_dtype() == np.dtype(np.float32) else 1e-5
    if h <= 0:
        raise ContractViolation("finite-difference step must be positive")

    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            x_plus = float(flat[i])  # realized (rounded) step
            p.invalidate_cache()
            f_plus = float(f().data)
            flat[i] = original - h
            x_minus = float(flat[i])
            p.invalidate_cache()
            f_minus = float(f().data)
            flat[i] = original
            p.invalidate_cache()
            numeric = (f_plus - f_minus) / (x_plus - x_minus)
            a = float(ga.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-6, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
