"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor requiring gradients records a node holding its
inputs and a backward rule. ``backward`` orders the reachable nodes into a
:class:`Tape` (inputs before outputs) and walks it in reverse, accumulating
gradients additively across fan-out.

Broadcasting is restricted to scalar-with-tensor and equal shapes for the
generic elementwise ops. Channel/feature broadcasting happens only inside the
explicit ``add_bias``, ``batch_norm`` and ``layer_norm`` ops.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Incompatible or invalid tensor shapes."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain."""


class ConvConfigError(ValueError):
    """Convolution geometry that does not tile the input exactly."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward)
    return out


# ---------------------------------------------------------------- tape


class Tape:
    """Topologically ordered nodes reachable from one output tensor."""

    def __init__(self, output: Tensor, order: list[Tensor]):
        self.output = output
        self.order = order

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.order if t.node is not None]

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in reversed(t.node.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(output, order)

    def __len__(self) -> int:
        return len(self.order)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if tape is None:
        tape = Tape.record(loss)
    elif tape.output is not loss:
        raise ValueError("tape was recorded for a different output")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        in_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.sum(g).reshape(like.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_fit(g * bd, a), _fit(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (_fit(g / bd, a), _fit(-g * out / bd, b)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU in its tanh form (exact derivative of that form)."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "gelu": gelu,
    "exp": exp,
    "log": log,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python number as ``b``."""
    if kind == "scale":
        return scale(as_tensor(a), b)
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if kind in ("relu", "gelu", "exp", "log"):
        return fn(as_tensor(a))
    return fn(a, b)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched product when both operands share leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` of ``x`` (feature or channel bias)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return _make(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=other)), "add_bias")


def add_broadcast(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` whose shape equals the trailing dims of ``x``."""
    lead = x.ndim - b.ndim
    if lead < 0 or x.shape[lead:] != b.shape:
        raise ShapeError(f"cannot broadcast {b.shape} onto {x.shape}")
    axes = tuple(range(lead))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_broadcast")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------- reductions


def _check_axis(a: Tensor, axis) -> None:
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if ax is not None and not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"axis {ax} invalid for rank {a.ndim}")


def _expand(g: np.ndarray, a: Tensor, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis(a, axis)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a, axis, keepdims).copy(),), "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis(a, axis)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size // max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand(g, a, axis, keepdims) / n,), "mean")


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max; the gradient is shared equally among tied maxima."""
    _check_axis(a, axis)
    out = a.data.max(axis=axis, keepdims=True)
    mask = (a.data == out).astype(np.float64)
    mask /= mask.sum(axis=axis, keepdims=True)
    res = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))
    return _make(res, (a,), lambda g: (_expand(g, a, axis, keepdims) * mask,), "max")


def reductions(kind: str, x: Tensor, axis=None) -> Tensor:
    if kind == "sum":
        return reduce_sum(x, axis)
    if kind == "mean":
        return reduce_mean(x, axis)
    if kind == "max":
        return reduce_max(x, axis)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    raise ValueError(f"unknown reduction {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    return reduce_mean(x, axis=(2, 3))


# ---------------------------------------------------------------- softmax family


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return _make(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------- normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}")
    axes = (0, 2, 3)
    view = (1, -1, 1, 1)
    xd = x.data
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(view)) * inv_std.reshape(view)
    gd = gamma.data.reshape(view)
    out = xhat * gd + beta.data.reshape(view)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        k = (gamma.data * inv_std).reshape(view)
        if training:
            # the dxhat reductions are gamma * dbeta and gamma * dgamma
            m = xd.size // xd.shape[1]
            dx = (k / m) * (m * g - dbeta.reshape(view) - xhat * dgamma.reshape(view))
        else:
            dx = g * k
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    mean = xd.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mean) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        dx = (inv_std / d) * (
            d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ConvConfigError(
            f"kernel {kernel}, stride {stride}, pad {pad} do not tile input size {size} exactly"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation of NCHW input with OIHW weights.

    ``groups`` may be 1 or equal to the channel count (depthwise, one filter
    per channel).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    depthwise = groups != 1
    if depthwise:
        if groups != c or o != c or cg != 1:
            raise ConvConfigError("only groups=1 or depthwise (groups == in == out channels) supported")
    elif cg != c:
        raise ShapeError(f"weight expects {cg} input channels, input has {c}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    wdat = w.data
    if depthwise:
        return _conv_depthwise(x, w, b, stride, pad, ho, wo)
    # channels-last staging: each window copy moves contiguous runs of C values
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    xp[:, pad : pad + h, pad : pad + wd, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wm = wdat.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols @ wm
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        dx = None
        if x.requires_grad:
            dcols = (gm @ wm.T).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            dx = np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + wd, :].transpose(0, 3, 1, 2))
        db = gm.sum(axis=0) if b is not None else None
        return dx, np.ascontiguousarray(dw), db

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw, "conv2d")


def _conv_depthwise(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int, ho: int, wo: int) -> Tensor:
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wdat = w.data

    def window(arr, i, j):
        return arr[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]

    out = np.zeros((n, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) * wdat[:, 0, i, j].reshape(1, -1, 1, 1)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def bw(g):
        dw = np.empty_like(wdat)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                dw[:, 0, i, j] = (g * window(xp, i, j)).sum(axis=(0, 2, 3))
                if dxp is not None:
                    window(dxp, i, j)[...] += g * wdat[:, 0, i, j].reshape(1, -1, 1, 1)
        dx = None
        if dxp is not None:
            dx = np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw, "conv2d")
