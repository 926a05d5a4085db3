"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and at
least one input requires a gradient, the op appends a node holding a backward
closure; :func:`backward` walks those nodes in reverse to produce gradients
for every leaf.

Layout is ``(batch, channel, height, width)`` row-major throughout, and
convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "GradCheckReport",
    "record",
    "backward",
    "gradient_check",
    "conv2d",
    "fully_connected",
    "activation",
    "relu",
    "sigmoid",
    "tanh",
    "softmax_over_taps",
    "upsample_nearest",
    "add",
    "mul",
    "scale",
    "total",
    "reshape",
    "slice_channels",
    "im2col",
]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dfnet_active_tape", default=None
)


class Tensor:
    """A numpy array plus a flag saying whether gradients should reach it.

    Tensors are treated as immutable once an op has produced them. Leaves that
    should be trained are created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def sum(self) -> "Tensor":
        return total(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops, active inside a ``with`` block.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor | None = None) -> "GradientMap":
        return backward(self, loss)


class GradientMap(dict):
    """Maps leaf tensors to gradient arrays; unreached leaves read as zero."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros_like(key.data)


def record(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log the op on the active tape.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per input, in order.
    """
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor | None = None) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. every leaf on ``tape``.

    ``loss`` defaults to the output of the last recorded node.
    """
    if loss is None:
        if not tape.nodes:
            raise ValueError("tape is empty")
        loss = tape.nodes[-1].output
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result = GradientMap()
    for key, leaf in leaves.items():
        result[leaf] = grads[key].reshape(leaf.shape).astype(leaf.dtype, copy=False)
    if id(loss) not in produced and loss.requires_grad:
        result[loss] = np.ones_like(loss.data)
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_leaf: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def gradient_check(
    builder: Callable[..., Tensor], leaves: Sequence[Tensor], eps: float = 1e-6
) -> GradCheckReport:
    """Compare tape gradients against central differences, element by element.

    ``builder(*leaves)`` must return a scalar Tensor. Leaves should hold
    float64 data; they are perturbed in place and restored afterwards.
    Relative error is ``|a - b| / max(1e-8, |a| + |b|)``.
    """
    for leaf in leaves:
        leaf.requires_grad = True
    with Tape() as tape:
        loss = builder(*leaves)
    analytic = backward(tape, loss)

    per_leaf = []
    for leaf in leaves:
        a = analytic[leaf].ravel()
        flat = leaf.data.reshape(-1)
        numeric = np.empty_like(a)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(builder(*leaves).data)
            flat[i] = orig - eps
            f_minus = float(builder(*leaves).data)
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * eps)
        rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
        per_leaf.append(float(rel.max()) if rel.size else 0.0)
    return GradCheckReport(max(per_leaf, default=0.0), per_leaf)


# ---------------------------------------------------------------------------
# primitive ops


def _check_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} must be rank 4 (N, C, H, W), got shape {x.shape}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad_h: int = 0, pad_w: int = 0) -> np.ndarray:
    """Lower ``x`` (N, C, H, W) to columns of shape (N, C*kh*kw, H', W').

    Row ``c*kh*kw + ky*kw + kx`` holds the input sample at window offset
    (ky, kx) of channel c.
    """
    if pad_h or pad_w:
        n, c, h, w = x.shape
        padded = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=x.dtype)
        padded[:, :, pad_h:pad_h + h, pad_w:pad_w + w] = x
        x = padded
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho, wo)


def col2im(
    cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int = 1, pad_h: int = 0, pad_w: int = 0
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = shape
    ho, wo = cols.shape[2], cols.shape[3]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += cols[:, :, ky, kx]
    return out[:, :, pad_h:pad_h + h, pad_w:pad_w + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, via im2col + batched matmul."""
    _check_rank4(x, "conv2d input")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be (Cout, Cin, kh, kw), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has Cin={cin}, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty ({ho}x{wo})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    cols = im2col(x.data, kh, kw, stride, pad, pad).reshape(n, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def _backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(n, cin * kh * kw, ho, wo)
            dx = col2im(dcols, x.shape, kh, kw, stride, pad, pad)
        db = g2.sum(axis=(0, 2)) if bias is not None else None
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, _backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on (N, C, 1, 1) inputs with a (Cout, C) weight matrix."""
    _check_rank4(x, "fully_connected input")
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ValueError(f"fully_connected expects 1x1 spatial extents, got {h}x{w}; reshape first")
    if weight.ndim != 2 or weight.shape[1] != c:
        raise ValueError(f"fully_connected weight must be (Cout, {c}), got {weight.shape}")
    cout = weight.shape[0]
    x2 = x.data.reshape(n, c)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, cout, 1, 1)

    def _backward(g):
        g2 = g.reshape(n, cout)
        dx = (g2 @ weight.data).reshape(x.shape)
        dw = g2.T @ x2
        return (dx, dw, g2.sum(axis=0) if bias is not None else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("fully_connected", inputs, out, _backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return record("relu", (x,), out, lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e))
    return record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", (x,), out, lambda g: (g * (1 - out * out),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# Subnormal floats slow BLAS several-fold. exp() inputs are floored so no
# probability is subnormal (the floor is far below anything representable
# next to 1) and subnormal gradient entries are flushed to zero.
_EXP_FLOOR = {np.dtype(np.float32): -60.0, np.dtype(np.float64): -600.0}


def softmax_over_taps(x: Tensor, group_size: int) -> Tensor:
    """Softmax over consecutive channel groups of ``group_size`` at every pixel."""
    _check_rank4(x, "softmax_over_taps input")
    n, c, h, w = x.shape
    if group_size < 1 or c % group_size:
        raise ValueError(f"channel count {c} is not divisible by group size {group_size}")
    z = x.data.reshape(n, c // group_size, group_size, h, w)
    y = z - z.max(axis=2, keepdims=True)
    np.maximum(y, _EXP_FLOOR.get(y.dtype, -60.0), out=y)
    np.exp(y, out=y)
    y /= y.sum(axis=2, keepdims=True)

    def _backward(g):
        g = g.reshape(y.shape)
        dz = g - (g * y).sum(axis=2, keepdims=True)
        dz *= y
        dz[np.abs(dz) < np.finfo(dz.dtype).tiny] = 0
        return (dz.reshape(x.shape),)

    return record("softmax_over_taps", (x,), y.reshape(x.shape), _backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_rank4(x, "upsample input")
    if factor < 1:
        raise ValueError("upsample factor must be positive")
    if factor == 1:
        return record("upsample_nearest", (x,), x.data.copy(), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record("upsample_nearest", (x,), out, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul needs identical shapes, got {a.shape} and {b.shape}")
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    return record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape),))


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)`` of an NCHW tensor."""
    _check_rank4(a, "slice_channels input")
    if not 0 <= start < stop <= a.shape[1]:
        raise ValueError(f"bad channel range [{start}, {stop}) for {a.shape[1]} channels")

    def _backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return record("slice_channels", (a,), a.data[:, start:stop], _backward)
