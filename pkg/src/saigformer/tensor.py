"""Dense tensors with reverse-mode automatic differentiation.

Feature maps are rank-4 ``(N, C, H, W)`` arrays.  Parameters keep their
natural shapes (a bias is ``(C,)``, a conv kernel ``(O, I/groups, kH, kW)``),
and attention reshapes features to ``(N, heads, d, H*W)``, so the engine
itself is rank-agnostic.

Every differentiable op records a node holding its inputs and a backward
closure.  Nodes receive a monotonically increasing id at construction, so
construction order is a valid topological order and ``backward`` simply
walks reachable nodes by descending id.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _kernels

_DTYPE = np.float32
_node_ids = itertools.count()

# op name -> multiplicative corruption of that op's input gradients; used only
# as a negative control for the gradient checker
_FAULTS: dict[str, float] = {}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension (e.g. ``"channels"``).
    """

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


def get_precision() -> type:
    return _DTYPE


def set_precision(name: str | type) -> None:
    """Set the build-wide float type: ``"float32"`` (default) or ``"float64"``."""
    global _DTYPE
    dt = np.dtype(name).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {name!r}")
    _DTYPE = dt


@contextlib.contextmanager
def precision(name: str | type) -> Iterator[None]:
    old = _DTYPE
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def inject_fault(op: str, factor: float = 1.01) -> Iterator[None]:
    """Scale the input gradients produced by ``op``'s backward (test hook)."""
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "id")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.id = next(_node_ids)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = _DTYPE if (arr.dtype.kind in "fiub") else arr.dtype
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
        for t in inputs:
            t.data.flags.writeable = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output._node is None:
        if output.requires_grad:
            output.grad = np.ones_like(output.data) if output.grad is None else output.grad + 1
        return

    # node id -> (node, tensor it produced)
    nodes: dict[int, tuple[_Node, Tensor]] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t._node is None or t._node.id in nodes:
            continue
        nodes[t._node.id] = (t._node, t)
        stack.extend(t._node.inputs)

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for nid in sorted(nodes, reverse=True):
        node, out_t = nodes[nid]
        g = grads.pop(id(out_t), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        factor = _FAULTS.get(node.op)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if factor is not None:
                gi = gi * factor
            if t._node is None:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, "div", (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.data)
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * s,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    keep = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out, dtype=x.dtype), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return div(sum(x, axis, keepdims), float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), lambda g: (g.transpose(inv),)
    )


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), "concat", tuple(xs), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        out.append(narrow(x, axis, start, n))
        start += n
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), "narrow", (x,), bw)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(
        np.ascontiguousarray(np.broadcast_to(x.data, shape)), "broadcast", (x,), lambda g: (_unbroadcast(g, old),)
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}", dim="inner")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# activations

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + _kernels.erf(xd * xd.dtype.type(_SQRT_HALF)))

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, "gelu", (x,), bw)


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype)
    return _make(out, "softplus", (x,), lambda g: (g * _sigmoid_np(xd),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over channels (axis 1) at every spatial location."""
    C = x.shape[1]
    if C == 0:
        raise ShapeError("layer_norm over zero channels", dim="channels")
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"layer_norm affine params must have shape ({C},)", dim="channels")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data.reshape(1, C, 1, 1)
    out = xhat * gd + bias.data.reshape(1, C, 1, 1)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gain.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gg, gb

    return _make(out.astype(xd.dtype), "layer_norm", (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups.

    Three paths: 1x1 convs are one matrix product, depthwise convs run a
    compiled loop, everything else is im2col plus a grouped matrix product.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    N, C, H, W = x.shape
    O, Cg, kH, kW = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ShapeError(f"channels {C} -> {O} not divisible by groups={groups}", dim="groups")
    if Cg != C // groups:
        raise ShapeError(
            f"kernel expects {Cg * groups} input channels, input has {C}", dim="in_channels"
        )
    if b is not None and b.shape != (O,):
        raise ShapeError(f"bias shape {b.shape} != ({O},)", dim="out_channels")
    Ho = (H + 2 * padding - kH) // stride + 1
    Wo = (W + 2 * padding - kW) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kH}x{kW} larger than padded input {H}x{W}", dim="spatial")

    G, Og, K = groups, O // groups, Cg * kH * kW
    xd, wd = x.data, w.data
    if wd.dtype != xd.dtype:
        raise TypeError(f"conv2d dtype mismatch: input {xd.dtype}, kernel {wd.dtype}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    pointwise = kH == 1 and kW == 1 and stride == 1 and G == 1
    depthwise = Cg == 1 and Og == 1 and not pointwise

    cols = None
    if pointwise:
        out = np.matmul(wd.reshape(O, C), xp.reshape(N, C, -1)).reshape(N, O, Ho, Wo)
    elif depthwise:
        out = np.empty((N, O, Ho, Wo), dtype=xd.dtype)
        _kernels.depthwise_forward(xp, wd, out, stride)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win.reshape(N, G, Cg, Ho, Wo, kH, kW).transpose(0, 1, 2, 5, 6, 3, 4)
        cols = np.ascontiguousarray(win).reshape(N, G, K, Ho * Wo)
        out = np.matmul(wd.reshape(G, Og, K), cols).reshape(N, O, Ho, Wo)
    if b is not None:
        out += b.data.reshape(1, O, 1, 1)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        need_x, need_w = x.requires_grad, w.requires_grad
        if pointwise:
            g2 = g.reshape(N, O, -1)
            if need_w:
                gw = np.tensordot(g2, xp.reshape(N, C, -1), axes=([0, 2], [0, 2])).reshape(O, C, 1, 1)
            if need_x:
                gx = np.matmul(wd.reshape(O, C).T, g2).reshape(N, C, H, W)
            return gx, gw, gb
        if depthwise:
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            _kernels.depthwise_backward(xp, wd, g, gxp, gw, stride)
        else:
            g2 = g.reshape(N, G, Og, Ho * Wo)
            if need_w:
                gw = np.matmul(g2, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(O, Cg, kH, kW)
            if need_x:
                gcols = np.matmul(np.swapaxes(wd.reshape(G, Og, K), -1, -2), g2)
                gcols = gcols.reshape(N, C, kH, kW, Ho, Wo)
                gxp = np.zeros_like(xp)
                for i in range(kH):
                    for j in range(kW):
                        gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, :, i, j]
        if need_x:
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, (gw if need_w else None), gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, "conv2d", inputs, bw)


# ---------------------------------------------------------------------------
# pixel shuffle / unshuffle
#
# Channel order: unshuffle places input channel c, sub-pixel (dy, dx) at output
# channel c*r*r + dy*r + dx.  For a 2x2 block [[a, b], [c, d]] the four output
# channels are (a, b, c, d).


def _unshuffle_np(a: np.ndarray, r: int) -> np.ndarray:
    N, C, H, W = a.shape
    a = a.reshape(N, C, H // r, r, W // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a).reshape(N, C * r * r, H // r, W // r)


def _shuffle_np(a: np.ndarray, r: int) -> np.ndarray:
    N, C, H, W = a.shape
    c = C // (r * r)
    a = a.reshape(N, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a).reshape(N, c, H * r, W * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    N, C, H, W = x.shape
    if H % r or W % r:
        raise ShapeError(f"pixel_unshuffle: {H}x{W} not divisible by {r}", dim="spatial")
    return _make(_unshuffle_np(x.data, r), "pixel_unshuffle", (x,), lambda g: (_shuffle_np(g, r),))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    if x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[1]} channels not divisible by {r * r}", dim="channels")
    return _make(_shuffle_np(x.data, r), "pixel_shuffle", (x,), lambda g: (_unshuffle_np(g, r),))


def pixel_resample(x: Tensor, r: int, direction: str) -> Tensor:
    if direction == "unshuffle":
        return pixel_unshuffle(x, r)
    if direction == "shuffle":
        return pixel_shuffle(x, r)
    raise ValueError(f"direction must be 'shuffle' or 'unshuffle', got {direction!r}")
