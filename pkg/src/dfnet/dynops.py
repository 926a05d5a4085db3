"""Dynamic filtering layers: filters arrive as data, one set per sample.

Generated taps are laid out along the channel axis. For filter ``f``, input
channel ``c`` and tap ``k`` (row-major over an ``s_h x s_w`` window) the
channel index is ``(f * c_b + c) * s_h * s_w + k``, and tap ``k`` reads the
input at offset ``(k // s_w - s_h // 2, k % s_w - s_w // 2)``. Taps that fall
outside the image read zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, col2im, im2col, record, softmax_over_taps

__all__ = [
    "FilterSpec",
    "FilterField",
    "BiasField",
    "tap_offsets",
    "broadcast_filters",
    "dynamic_convolution",
    "dynamic_local_filtering",
    "dynamic_filtering",
    "separable_dynamic_filtering",
    "dynamic_pixel_bias",
    "softmax_local_filtering",
]

MODES = ("convolutional", "local")


@dataclass(frozen=True)
class FilterSpec:
    s_h: int
    s_w: int
    n: int = 1
    c_b: int = 1
    mode: str = "local"

    def __post_init__(self):
        if self.s_h < 1 or self.s_w < 1 or self.s_h % 2 == 0 or self.s_w % 2 == 0:
            raise ValueError(f"filter extents must be odd and >= 1, got {self.s_h}x{self.s_w}")
        if self.n < 1 or self.c_b < 1:
            raise ValueError("filter count and input channel count must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def taps_per_filter(self) -> int:
        """Taps in one filter across all input channels (the softmax group)."""
        return self.s_h * self.s_w * self.c_b

    @property
    def channels(self) -> int:
        return self.taps_per_filter * self.n


def tap_offsets(s_h: int, s_w: int) -> tuple[np.ndarray, np.ndarray]:
    """(dy, dx) offsets of the ``s_h * s_w`` taps of one filter, row-major."""
    k = np.arange(s_h * s_w)
    return k // s_w - s_h // 2, k % s_w - s_w // 2


@dataclass(frozen=True)
class FilterField:
    spec: FilterSpec
    taps: Tensor

    def __post_init__(self):
        t = self.taps
        if t.ndim != 4 or t.shape[1] != self.spec.channels:
            raise ValueError(
                f"taps must be (N, {self.spec.channels}, H, W) for {self.spec}, got {t.shape}"
            )
        if self.spec.mode == "convolutional" and t.shape[2:] != (1, 1):
            raise ValueError(f"convolutional taps must be (N, C, 1, 1), got {t.shape}")

    @property
    def mode(self) -> str:
        return self.spec.mode


@dataclass(frozen=True)
class BiasField:
    values: Tensor


def broadcast_filters(field: FilterField, height: int, width: int) -> FilterField:
    """Repeat a convolutional field at every position, giving a local field."""
    if field.mode != "convolutional":
        raise ValueError("only convolutional fields can be broadcast")
    t = field.taps
    data = np.broadcast_to(t.data, (t.shape[0], t.shape[1], height, width))
    out = record(
        "broadcast_filters", (t,), np.ascontiguousarray(data),
        lambda g: (g.sum(axis=(2, 3), keepdims=True),),
    )
    spec = FilterSpec(field.spec.s_h, field.spec.s_w, field.spec.n, field.spec.c_b, "local")
    return FilterField(spec, out)


def _check_input(x: Tensor, spec: FilterSpec) -> None:
    if x.ndim != 4:
        raise ValueError(f"filtered input must be rank 4, got {x.shape}")
    if x.shape[1] != spec.c_b:
        raise ValueError(f"input has {x.shape[1]} channels but filters expect c_b={spec.c_b}")


def dynamic_convolution(x: Tensor, field: FilterField) -> Tensor:
    """Filter each sample with its own generated filter, shared over positions."""
    spec = field.spec
    if spec.mode != "convolutional":
        raise ValueError("dynamic_convolution needs a convolutional filter field")
    _check_input(x, spec)
    n_b, _, h, w = x.shape
    if field.taps.shape[0] != n_b:
        raise ValueError(f"batch mismatch: input {n_b}, filters {field.taps.shape[0]}")
    ph, pw = spec.s_h // 2, spec.s_w // 2
    r = spec.taps_per_filter
    taps = field.taps.data.reshape(n_b, spec.n, r)
    cols = im2col(x.data, spec.s_h, spec.s_w, 1, ph, pw).reshape(n_b, r, h * w)
    out = np.matmul(taps, cols).reshape(n_b, spec.n, h, w)

    def _backward(g):
        g2 = g.reshape(n_b, spec.n, h * w)
        cols_ = im2col(x.data, spec.s_h, spec.s_w, 1, ph, pw).reshape(n_b, r, h * w)
        dtaps = np.matmul(g2, cols_.transpose(0, 2, 1)).reshape(field.taps.shape)
        dcols = np.matmul(taps.transpose(0, 2, 1), g2).reshape(n_b, r, h, w)
        dx = col2im(dcols, x.shape, spec.s_h, spec.s_w, 1, ph, pw)
        return (dx, dtaps)

    return record("dynamic_convolution", (x, field.taps), out, _backward)


def dynamic_local_filtering(x: Tensor, field: FilterField) -> Tensor:
    """Filter every position of every sample with its own generated filter."""
    spec = field.spec
    if spec.mode != "local":
        raise ValueError("dynamic_local_filtering needs a local filter field")
    _check_input(x, spec)
    n_b, _, h, w = x.shape
    if field.taps.shape[0] != n_b or field.taps.shape[2:] != (h, w):
        raise ValueError(
            f"filter field {field.taps.shape} does not match input {x.shape} (batch and spatial extents)"
        )
    ph, pw = spec.s_h // 2, spec.s_w // 2
    r = spec.taps_per_filter
    taps = field.taps.data.reshape(n_b, spec.n, r, h, w)
    cols = im2col(x.data, spec.s_h, spec.s_w, 1, ph, pw)
    if spec.n == 1:
        out = (taps[:, 0] * cols).sum(axis=1, keepdims=True)
    else:
        out = np.einsum("nfrhw,nrhw->nfhw", taps, cols)

    def _backward(g):
        cols_ = im2col(x.data, spec.s_h, spec.s_w, 1, ph, pw)
        if spec.n == 1:
            dtaps = g * cols_
            dcols = g * taps[:, 0]
        else:
            dtaps = g[:, :, None] * cols_[:, None]
            dcols = np.einsum("nfrhw,nfhw->nrhw", taps, g)
        dx = col2im(dcols, x.shape, spec.s_h, spec.s_w, 1, ph, pw)
        return (dx, dtaps.reshape(field.taps.shape))

    return record("dynamic_local_filtering", (x, field.taps), out, _backward)


def dynamic_filtering(x: Tensor, field: FilterField) -> Tensor:
    """Dispatch on the field's mode."""
    if field.mode == "local":
        return dynamic_local_filtering(x, field)
    return dynamic_convolution(x, field)


def separable_dynamic_filtering(x: Tensor, h_field: FilterField, v_field: FilterField) -> Tensor:
    """Horizontal (1 x s_w) filtering followed by vertical (s_h x 1) filtering."""
    if h_field.mode != v_field.mode:
        raise ValueError(f"separable filters must share a mode, got {h_field.mode} and {v_field.mode}")
    if h_field.spec.s_h != 1 or v_field.spec.s_w != 1:
        raise ValueError("expected a 1 x s_w horizontal field and an s_h x 1 vertical field")
    return dynamic_filtering(dynamic_filtering(x, h_field), v_field)


def dynamic_pixel_bias(x: Tensor, bias: BiasField | Tensor) -> Tensor:
    values = bias.values if isinstance(bias, BiasField) else bias
    if values.shape != x.shape:
        raise ValueError(f"bias shape {values.shape} does not match input {x.shape}")
    return add(x, values)


def softmax_local_filtering(x: Tensor, logits: Tensor, spec: FilterSpec) -> tuple[Tensor, FilterField]:
    """Softmax over each filter's taps followed by local filtering, as one node.

    Numerically the same as ``dynamic_local_filtering(x, FilterField(spec,
    softmax_over_taps(logits, r)))`` but cheaper to differentiate: with
    ``y = softmax(logits)`` and ``out = sum_k y_k cols_k`` the logit gradient
    collapses to ``g * y_k * (cols_k - out)``. The returned field shares the
    normalized taps, so losses on the field still reach ``logits``.
    """
    r = spec.taps_per_filter
    taps = softmax_over_taps(logits, r)
    field = FilterField(spec, taps)
    if spec.n != 1:
        return dynamic_local_filtering(x, field), field
    _check_input(x, spec)
    n_b, _, h, w = x.shape
    if taps.shape[0] != n_b or taps.shape[2:] != (h, w):
        raise ValueError(
            f"filter field {taps.shape} does not match input {x.shape} (batch and spatial extents)"
        )
    ph, pw = spec.s_h // 2, spec.s_w // 2
    y = taps.data
    cols = im2col(x.data, spec.s_h, spec.s_w, 1, ph, pw)
    out = (y * cols).sum(axis=1, keepdims=True)

    def _backward(g):
        dz = cols - out
        dz *= y
        dz *= g
        # tiny taps times tiny upstream gradients go subnormal and stall BLAS
        dz[np.abs(dz) < np.finfo(dz.dtype).tiny] = 0
        dx = None
        if x.requires_grad:
            dx = col2im(g * y, x.shape, spec.s_h, spec.s_w, 1, ph, pw)
        return (dx, dz)

    return record("softmax_local_filtering", (x, logits), out, _backward), field
