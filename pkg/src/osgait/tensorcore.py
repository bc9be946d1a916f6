"""Small dense-tensor engine with reverse-mode autodiff on top of numpy.

Only the primitives the gait network needs are provided. Every op builds a
node holding its parents and a closure mapping the output gradient to one
gradient per parent; ``backward`` walks the nodes in reverse topological
order (the :class:`ComputationTape`).

Second-order terms (the critic gradient penalty) are obtained by writing the
input-gradient of an MLP in terms of these same ops, so the resulting norm is
an ordinary node on the tape.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic info ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_over_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Tape and backward sweep
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputationTape:
    """Nodes reachable from a root, in topological order (leaves first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    @property
    def entries(self) -> list[TapeEntry]:
        return [
            TapeEntry(n.op, tuple(id(p) for p in n._parents), id(n))
            for n in self.nodes
            if not n.is_leaf
        ]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = ComputationTape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        # zero subgradient at the origin instead of inf
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node(out, (a,), bw, "sqrt")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data > lo
    return _node(np.where(mask, a.data, lo).astype(a.dtype), (a,), lambda g: (g * mask,), "clamp_min")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    """x for x > 0, alpha*(exp(x)-1) otherwise. Derivative at 0 is taken as 1."""
    neg = np.minimum(x.data, 0.0)
    out = np.maximum(x.data, 0.0) + alpha * np.expm1(neg)
    deriv = None

    def bw(g):
        nonlocal deriv
        if deriv is None:
            # d/dx = exp(min(x, 0)) for alpha = 1
            deriv = np.exp(neg) if alpha == 1.0 else _elu_grad(x.data, alpha)
        return (g * deriv,)

    return _node(out, (x,), bw, "elu")


def _elu_grad(x: np.ndarray, alpha: float) -> np.ndarray:
    return (x >= 0) + (x < 0) * alpha * np.exp(np.minimum(x, 0.0))


def elu_derivative(x: Tensor, alpha: float = 1.0) -> Tensor:
    """Pointwise d elu/dx as a differentiable node (needed for double backward)."""
    out = _elu_grad(x.data, alpha).astype(x.dtype)

    def bw(g):
        return (g * (x.data < 0) * alpha * np.exp(np.minimum(x.data, 0.0)),)

    return _node(out, (x,), bw, "elu_derivative")


# ---------------------------------------------------------------------------
# Shape and reduction ops
# ---------------------------------------------------------------------------

def _check_axis(axis, ndim):
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")


def sum_over_axis(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is not None:
        _check_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean_over_axis(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        _check_axis(axis, x.ndim)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ValueError("mean over an empty axis")
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"cannot reshape {x.shape} into {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(np.array(out), (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    _check_axis(axis, xs[0].ndim)
    sizes = [x.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, xs, bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(idx)))
        start += n
    return out


# ---------------------------------------------------------------------------
# Linear algebra and fused layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for 2-D x, fused so the bias gradient is a single BLAS call."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data
    out += b.data

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = np.ones(len(g), dtype=g.dtype) @ g if b.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, b), bw, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, training: bool,
               running_mean: np.ndarray, running_var: np.ndarray,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation, channel axis last, statistics over all other axes.

    In training mode the running buffers are updated in place.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must have shape ({C},)")
    flat = x.data.reshape(-1, C)
    n = flat.shape[0]
    if n == 0:
        raise ValueError("batch_norm over an empty reduction axis")
    # column sums through BLAS are several times faster than ndarray.sum(axis=0)
    ones = np.ones(n, dtype=flat.dtype)
    if training:
        mu = ones @ flat / n
        centered = flat - mu
        var = ones @ (centered * centered) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        centered = flat - mu
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    scale = gamma.data * inv_std
    out = centered * scale
    out += beta.data
    out = out.reshape(x.shape)

    def bw(g):
        gf = g.reshape(-1, C)
        gbeta = ones @ gf
        ggamma = (ones @ (gf * centered)) * inv_std
        gx = None
        if x.requires_grad:
            if training:
                gx = gf - centered * (inv_std * ggamma / n)
                gx -= gbeta / n
                gx *= scale
            else:
                gx = gf * scale
            gx = gx.reshape(x.shape)
        return (gx, ggamma if gamma.requires_grad else None,
                gbeta if beta.requires_grad else None)

    return _node(out, (x, gamma, beta), bw, "batch_norm")


def conv1d_dilated_causal(x: Tensor, w: Tensor, dilation: int) -> Tensor:
    """Causal 1-D convolution, kernel length 3, time axis 1, channels last.

    x: (B, T, C_in); w: (C_out, C_in, 3). Output (B, T, C_out) where
    out[t] = sum_j w[:, :, j] @ x[t - (2 - j) * dilation] with zeros before t=0.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if x.ndim != 3 or w.ndim != 3 or w.shape[2] != 3 or w.shape[1] != x.shape[2]:
        raise ValueError(f"conv shape mismatch: x {x.shape}, w {w.shape}")
    B, T, Cin = x.shape
    Cout = w.shape[0]
    pad = 2 * dilation
    xp = np.zeros((B, T + pad, Cin), dtype=x.dtype)
    xp[:, pad:] = x.data
    out = np.zeros((B * T, Cout), dtype=np.result_type(x.dtype, w.dtype))
    taps = [xp[:, j * dilation:j * dilation + T].reshape(B * T, Cin) for j in range(3)]
    for j in range(3):
        out += taps[j] @ w.data[:, :, j].T

    def bw(g):
        gf = g.reshape(B * T, Cout)
        gw = None
        if w.requires_grad:
            gw = np.stack([gf.T @ taps[j] for j in range(3)], axis=2)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(3):
                gxp[:, j * dilation:j * dilation + T] += (gf @ w.data[:, :, j]).reshape(B, T, Cin)
            gx = gxp[:, pad:]
        return gx, gw

    return _node(out.reshape(B, T, Cout), (x, w), bw, "conv1d")


# ---------------------------------------------------------------------------
# Gradient-norm helper for the critic penalty
# ---------------------------------------------------------------------------

def gradient_norm_of_scalar_fn(f, at: Tensor, columns=None) -> Tensor:
    """Row-wise Euclidean norm of the input-gradient of a scalar function.

    ``f`` maps a (B, D) tensor to (B, 1) (rows independent) or a 1-D tensor to
    a scalar. When ``f`` exposes ``input_gradient`` the gradient is built from
    tape ops and the norm stays differentiable in f's parameters; otherwise it
    is obtained by a first-order sweep and returned as a constant.
    ``columns`` restricts the norm to a slice of the input coordinates.
    """
    at = as_tensor(at)
    if hasattr(f, "input_gradient"):
        g = f.input_gradient(at)
    else:
        probe = Tensor(at.data.copy(), requires_grad=True)
        with _enable_grad():
            out = f(probe)
            backward(sum_over_axis(out))
        g = Tensor(probe.grad)
    if columns is not None:
        g = getitem(g, (Ellipsis, columns))
    if g.ndim == 1:
        return sqrt(sum_over_axis(square(g)))
    return sqrt(sum_over_axis(square(g), axis=-1))


@contextlib.contextmanager
def _enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def parameters_checksum(params: Iterable[Tensor]) -> float:
    return float(sum(np.sum(np.abs(p.data), dtype=np.float64) for p in params))
