"""Dense f64 tensors with reverse-mode differentiation.

Only the operations needed by the attention network, the CNN backbone and the
orthogonality loss are provided. Tensors are treated as immutable values; every
operation returns a new tensor and, while gradient recording is enabled, links
it to its inputs with a closure that maps the output gradient to input
gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "dot",
    "concat",
    "stack",
    "sigmoid",
    "relu",
    "absolute",
    "exp",
    "log",
    "sqrt",
    "l2_norm",
    "normalize",
    "softmax",
    "softmax_cross_entropy",
    "conv2d",
    "depthwise_conv2d",
    "depthwise_conv_pool",
    "avg_pool2d",
    "max_pool2d",
    "global_avg_pool",
    "global_max_pool",
    "AdamW",
    "adamw_step",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100.0  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains non-finite values")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return _transpose(self, None)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return absolute(self)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: divisor contains zeros")

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), bw, "div")


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2; use dot() for vectors")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs two equal-length vectors, got {a.shape} and {b.shape}")

    def bw(g):
        return g * b.data, g * a.data

    return _result(np.asarray(a.data @ b.data), (a, b), bw, "dot")


# -- reductions and shape ops -------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    axes = _norm_axis(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def _mean(x: Tensor, axis, keepdims: bool) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), bw, "mean")


def _reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), bw, "reshape")


def _transpose(x: Tensor, axes) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(data, (x,), bw, "transpose")


def _getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index with ints, slices or integer arrays, not tensors")
    data = np.asarray(x.data[index])

    def bw(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(data.copy(), (x,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of an empty list")
    if len({t.shape for t in ts}) != 1:
        raise ShapeError("stack needs tensors of identical shape")
    data = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(data, tuple(ts), bw, "stack")


# -- pointwise nonlinearities -------------------------------------------------
def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), bw, "sigmoid")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def absolute(x) -> Tensor:
    """|x|, with subgradient 0 at the kink."""
    x = _as_tensor(x)

    def bw(g):
        return (g * np.sign(x.data),)

    return _result(np.abs(x.data), (x,), bw, "abs")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)

    def bw(g):
        return (g * e,)

    return _result(e, (x,), bw, "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")

    def bw(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), bw, "log")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt of a negative value")
    r = np.sqrt(x.data)

    def bw(g):
        if np.any(r == 0):
            raise ZeroDivisionError("sqrt gradient at 0")
        return (g / (2.0 * r),)

    return _result(r, (x,), bw, "sqrt")


def l2_norm(x, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm. The gradient at a zero vector is taken as 0."""
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    nrm = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm > 0, g * x.data / safe, 0.0),)

    data = nrm if keepdims else np.squeeze(nrm, axis=axes)
    return _result(np.asarray(data), (x,), bw, "l2_norm")


def normalize(x, axis=None) -> Tensor:
    """x / ||x||; raises ZeroDivisionError on a zero vector."""
    x = _as_tensor(x)
    nrm = l2_norm(x, axis=axis, keepdims=True)
    return div(x, nrm)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Plain (non-recorded) softmax for inference code."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    z = data - data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy needs (N, C) logits and N labels, got {logits.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(n), labels] - logsum
    loss = -logp_true.mean()

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


# -- convolution and pooling --------------------------------------------------
def _pad_amount(padding, k: int, stride: int) -> int:
    if padding == "same":
        # output size ceil(n / stride); exact "same" size when stride is 1
        if k % 2 == 0:
            raise ShapeError("'same' padding needs an odd kernel")
        return k // 2
    if padding == "valid":
        return 0
    p = int(padding)
    if p < 0:
        raise ShapeError("negative padding")
    return p


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _out_size(n: int, k: int, stride: int) -> int:
    size = (n - k) // stride + 1
    if size < 1:
        raise ShapeError(f"kernel {k} does not fit input extent {n}")
    return size


def conv2d(x, w, b=None, stride: int = 1, padding=0) -> Tensor:
    """Standard 2-D convolution (cross-correlation), NCHW layout."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    cout, cin, k, _ = w.shape
    p = _pad_amount(padding, k, stride)
    xp = _pad(x.data, p)
    n = x.shape[0]
    ho = _out_size(xp.shape[2], k, stride)
    wo = _out_size(xp.shape[3], k, stride)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},)")
        out = out + b.data
        parents = (x, w, b)
    data = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros(xp.shape)
            for a in range(k):
                for c in range(k):
                    gxp[:, :, a : a + stride * ho : stride, c : c + stride * wo : stride] += dcols[
                        :, :, :, :, a, c
                    ].transpose(0, 3, 1, 2)
            gx = _unpad(gxp, p)
        grads = [gx, gw]
        if len(parents) == 3:
            grads.append(gmat.sum(axis=0))
        return grads

    return _result(np.ascontiguousarray(data), parents, bw, "conv2d")


def _check_depthwise(x: Tensor, w: Tensor, b: Tensor) -> None:
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"depthwise conv: input {x.shape} incompatible with filter bank {w.shape}")
    if b.shape != w.shape[:2]:
        raise ShapeError(f"depthwise conv: bias must have shape {w.shape[:2]}")


def depthwise_conv2d(x, w, b, stride: int = 1, padding="same") -> Tensor:
    """Depthwise convolution with G filters per input channel.

    ``w`` has shape (G, D, k, k) and ``b`` shape (G, D). The output has
    G*D channels in block layout: channel ``g*D + j`` is filter ``g`` applied
    to input channel ``j``.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_depthwise(x, w, b)
    G, D, k, _ = w.shape
    p = _pad_amount(padding, k, stride)
    xp = np.ascontiguousarray(_pad(x.data, p))
    _out_size(xp.shape[2], k, stride)
    _out_size(xp.shape[3], k, stride)
    out = _kernels.dwconv_forward(xp, np.ascontiguousarray(w.data), np.ascontiguousarray(b.data), stride)
    n, _, _, ho, wo = out.shape

    def bw(g):
        g5 = np.ascontiguousarray(g.reshape(n, G, D, ho, wo))
        gw, gxp = _kernels.dwconv_backward(xp, np.ascontiguousarray(w.data), g5, stride)
        return _unpad(gxp, p), gw, g5.sum(axis=(0, 3, 4))

    return _result(out.reshape(n, G * D, ho, wo), (x, w, b), bw, "depthwise_conv2d")


def depthwise_conv_pool(x, w, b, stride: int = 1, padding="same") -> Tensor:
    """Fused depthwise convolution + global average and max pooling.

    Equivalent to stacking ``global_avg_pool`` and ``global_max_pool`` of
    ``depthwise_conv2d(x, w, b)``; returns shape (N, 2, G, D) with index 0 the
    average and index 1 the maximum.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_depthwise(x, w, b)
    k = w.shape[2]
    p = _pad_amount(padding, k, stride)
    xp = np.ascontiguousarray(_pad(x.data, p))
    ho = _out_size(xp.shape[2], k, stride)
    wo = _out_size(xp.shape[3], k, stride)
    wc = np.ascontiguousarray(w.data)
    avg, mx, arg = _kernels.dwconv_pool_forward(xp, wc, np.ascontiguousarray(b.data), stride)

    def bw(g):
        gw, gb, gxp = _kernels.dwconv_pool_backward(
            xp, wc, arg, np.ascontiguousarray(g[:, 0]), np.ascontiguousarray(g[:, 1]), stride, ho, wo
        )
        return _unpad(gxp, p), gw, gb

    return _result(np.stack([avg, mx], axis=1), (x, w, b), bw, "depthwise_conv_pool")


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    ho = _out_size(x.shape[2], k, stride)
    wo = _out_size(x.shape[3], k, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def avg_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d needs NCHW input")
    s = stride or kernel
    win = _windows(x.data, kernel, s)
    ho, wo = win.shape[2:4]

    def bw(g):
        gx = np.zeros(x.shape)
        share = g / (kernel * kernel)
        for a in range(kernel):
            for c in range(kernel):
                gx[:, :, a : a + s * ho : s, c : c + s * wo : s] += share
        return (gx,)

    return _result(win.mean(axis=(4, 5)), (x,), bw, "avg_pool2d")


def max_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    """Windowed max; each window routes its gradient to its first argmax."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("max_pool2d needs NCHW input")
    s = stride or kernel
    win = _windows(x.data, kernel, s)
    n, ch, ho, wo = win.shape[:4]
    flat = win.reshape(n, ch, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape)
        for a in range(kernel):
            for c in range(kernel):
                hit = arg == a * kernel + c
                gx[:, :, a : a + s * ho : s, c : c + s * wo : s] += np.where(hit, g, 0.0)
        return (gx,)

    return _result(out, (x,), bw, "max_pool2d")


def global_avg_pool(x) -> Tensor:
    """Mean over the two spatial axes: (N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool needs NCHW input")
    return _mean(x, (2, 3), False)


def global_max_pool(x) -> Tensor:
    """Max over the two spatial axes with lowest-flat-index tie-break."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_max_pool needs NCHW input")
    n, ch, h, w = x.shape
    flat = x.data.reshape(n, ch, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros((n, ch, h * w))
        np.put_along_axis(gx, arg[..., None], g[..., None], axis=-1)
        return (gx.reshape(x.shape),)

    return _result(out, (x,), bw, "global_max_pool")


# -- differentiation ----------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(leaf) to every reachable leaf.

    Leaf gradients are added to ``leaf.grad`` (accumulating across calls until
    ``zero_grad``); the gradients contributed by this call are also returned.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            contributed[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                pg = _unbroadcast(pg, parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return contributed


# -- optimiser ----------------------------------------------------------------
def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One AdamW update applied in place to ``params``.

    ``state`` holds ``step`` and the lists ``m`` and ``v``; it is initialised
    on first use.
    """
    b1, b2 = betas
    if "m" not in state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ShapeError("params, grads and optimiser state differ in length")
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a list of leaves."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 0.002,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.betas,
            self.eps,
            self.weight_decay,
        )
