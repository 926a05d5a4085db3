"""Filter-generating networks for the steerable, video and stereo tasks.

A :class:`Model` is a flat map of named parameter tensors plus a JSON-able
architecture descriptor. Forward procedures are plain functions that read
the descriptor; nothing is hidden in closures, so a model reloaded from a
checkpoint behaves exactly like the one that was saved.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    conv2d,
    fully_connected,
    relu,
    slice_channels,
    softmax_over_taps,
    upsample_nearest,
)
from .dynops import (
    FilterField,
    FilterSpec,
    dynamic_convolution,
    dynamic_pixel_bias,
    softmax_local_filtering,
)

__all__ = [
    "Model",
    "VideoNetConfig",
    "StereoNetConfig",
    "count_parameters",
    "build_steerable_net",
    "steerable_filters",
    "steerable_forward",
    "build_video_net",
    "video_rollout",
    "video_predict",
    "Rollout",
    "build_stereo_net",
    "stereo_filters",
    "stereo_predict",
]

KINDS = ("steerable", "video", "video_bias", "stereo")


@dataclass(eq=False)
class Model:
    kind: str
    arch: dict
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def dtype(self):
        for p in self.params.values():
            return p.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True, name=k) for k, p in self.params.items()}
        return Model(self.kind, dict(self.arch), params)

    def copy(self) -> "Model":
        return self.astype(self.dtype)


def count_parameters(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _add_conv(params, arch_layers, rng, dtype, name, cin, cout, k=3, stride=1):
    # deferred import: training imports this module
    from .training import he_init

    fan_in = cin * k * k
    params[f"{name}.weight"] = he_init((cout, cin, k, k), fan_in, rng, dtype, name=f"{name}.weight")
    params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
    arch_layers.append({"name": name, "type": "conv", "in": cin, "out": cout, "k": k, "stride": stride})


def _conv(model: Model, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = model.params[f"{name}.weight"]
    return conv2d(x, w, model.params[f"{name}.bias"], stride=stride, pad=w.shape[2] // 2)


# ---------------------------------------------------------------------------
# steerable filters: angle -> 9x9 filter -> dynamic convolution


def build_steerable_net(
    hidden_sizes: Sequence[int] = (32,), filter_size: int = 9, seed=0, dtype=np.float32
) -> Model:
    """Fully connected net mapping (cos a, sin a) to a ``filter_size``^2 filter."""
    from .training import he_init

    if filter_size < 1 or filter_size % 2 == 0:
        raise ValueError(f"filter_size must be odd, got {filter_size}")
    rng = _rng(seed)
    sizes = [2, *hidden_sizes, filter_size * filter_size]
    params: dict[str, Tensor] = {}
    layers = []
    for i, (cin, cout) in enumerate(zip(sizes[:-1], sizes[1:])):
        name = f"fc{i}"
        params[f"{name}.weight"] = he_init((cout, cin), cin, rng, dtype, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
        layers.append({"name": name, "type": "fc", "in": cin, "out": cout})
    arch = {"hidden_sizes": list(hidden_sizes), "filter_size": filter_size, "layers": layers}
    return Model("steerable", arch, params)


def encode_angles(angles, dtype=np.float32) -> Tensor:
    a = np.asarray(angles, dtype=np.float64).reshape(-1)
    return Tensor(np.stack([np.cos(a), np.sin(a)], axis=1).reshape(-1, 2, 1, 1).astype(dtype))


def steerable_filters(model: Model, angles) -> FilterField:
    x = encode_angles(angles, model.dtype)
    layers = model.arch["layers"]
    for i, layer in enumerate(layers):
        name = layer["name"]
        x = fully_connected(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"])
        if i < len(layers) - 1:
            x = relu(x)
    s = model.arch["filter_size"]
    return FilterField(FilterSpec(s, s, 1, 1, "convolutional"), x)


def steerable_forward(model: Model, image: Tensor, angles) -> Tensor:
    """Filter each image with the (signed, unnormalized) filter for its angle."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.dtype))
    return dynamic_convolution(image, steerable_filters(model, angles))


# ---------------------------------------------------------------------------
# encoder / decoder shared by the video and stereo nets


@dataclass
class VideoNetConfig:
    height: int = 64
    width: int = 64
    enc_channels: int = 32
    hidden_channels: int = 64
    filter_size: int = 9
    with_bias: bool = False


@dataclass
class StereoNetConfig:
    height: int = 64
    width: int = 128
    enc_channels: int = 32
    hidden_channels: int = 64
    filter_width: int = 13


def _build_encoder_decoder(params, layers, rng, dtype, c1, c2, out_channels, recurrent):
    _add_conv(params, layers, rng, dtype, "enc1", 1, c1)
    _add_conv(params, layers, rng, dtype, "enc2", c1, c1, stride=2)
    _add_conv(params, layers, rng, dtype, "enc3", c1, c2)
    _add_conv(params, layers, rng, dtype, "enc4", c2, c2, stride=2)
    if recurrent:
        _add_conv(params, layers, rng, dtype, "rec1", c2, c2)
        _add_conv(params, layers, rng, dtype, "rec2", c2, c2)
    _add_conv(params, layers, rng, dtype, "dec1", c2, c1)
    _add_conv(params, layers, rng, dtype, "dec2", c1, c1)
    _add_conv(params, layers, rng, dtype, "dec3", c1, out_channels)


def _encode(model: Model, x: Tensor) -> Tensor:
    x = relu(_conv(model, "enc1", x))
    x = relu(_conv(model, "enc2", x, stride=2))
    x = relu(_conv(model, "enc3", x))
    return relu(_conv(model, "enc4", x, stride=2))


def _decode(model: Model, h: Tensor) -> Tensor:
    x = relu(_conv(model, "dec1", upsample_nearest(h, 2)))
    x = relu(_conv(model, "dec2", upsample_nearest(x, 2)))
    return _conv(model, "dec3", x)


def build_video_net(cfg: VideoNetConfig | dict | None = None, seed=0, dtype=np.float32) -> Model:
    if cfg is None:
        cfg = VideoNetConfig()
    elif isinstance(cfg, dict):
        cfg = VideoNetConfig(**cfg)
    if cfg.height % 4 or cfg.width % 4:
        raise ValueError(f"frame size {cfg.height}x{cfg.width} must be divisible by 4")
    if cfg.filter_size % 2 == 0:
        raise ValueError("filter_size must be odd")
    rng = _rng(seed)
    params: dict[str, Tensor] = {}
    layers: list[dict] = []
    taps = cfg.filter_size * cfg.filter_size
    _build_encoder_decoder(
        params, layers, rng, dtype, cfg.enc_channels, cfg.hidden_channels,
        taps + int(cfg.with_bias), recurrent=True,
    )
    if cfg.with_bias:
        # The bias reaches the output unsquashed, so He-scaled weights would start
        # every pixel at a random offset. Zero weights make it start at zero.
        params["dec3.weight"].data[taps] = 0
    arch = {**asdict(cfg), "layers": layers}
    return Model("video_bias" if cfg.with_bias else "video", arch, params)


@dataclass
class Rollout:
    predictions: list[Tensor]
    fields: list[FilterField]
    biases: list[Tensor]
    hidden: Tensor


def _recur(model: Model, frame: Tensor, hidden: Tensor | None) -> Tensor:
    enc = _encode(model, frame)
    if hidden is None:
        hidden = Tensor(np.zeros(enc.shape, dtype=enc.dtype))
    rec = _conv(model, "rec2", relu(_conv(model, "rec1", hidden)))
    return relu(add(enc, rec))


def _video_output(model: Model, frame: Tensor, hidden: Tensor):
    s = model.arch["filter_size"]
    out = _decode(model, hidden)
    taps = s * s
    bias = None
    if model.kind == "video_bias":
        bias = slice_channels(out, taps, taps + 1)
        out = slice_channels(out, 0, taps)
    pred, fld = softmax_local_filtering(frame, out, FilterSpec(s, s, 1, 1, "local"))
    if bias is not None:
        pred = dynamic_pixel_bias(pred, bias)
    return pred, fld, bias


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def video_rollout(model: Model, inputs: Sequence, horizon: int, forced: Sequence | None = None) -> Rollout:
    """Closed-loop prediction of ``horizon`` frames following ``inputs``.

    The recurrent state starts at zero and absorbs every input frame; the
    decoder runs only where a prediction is needed. After the inputs, each
    prediction becomes the next input unless ``forced`` supplies ground-truth
    frames instead.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not inputs:
        raise ValueError("need at least one input frame")
    dtype = model.dtype
    hidden = None
    for x in inputs:
        frame = _as_tensor(x, dtype)
        hidden = _recur(model, frame, hidden)
    preds, fields, biases = [], [], []
    for k in range(horizon):
        if k > 0:
            frame = preds[-1] if forced is None else _as_tensor(forced[k - 1], dtype)
            hidden = _recur(model, frame, hidden)
        pred, fld, bias = _video_output(model, frame, hidden)
        preds.append(pred)
        fields.append(fld)
        if bias is not None:
            biases.append(bias)
    return Rollout(preds, fields, biases, hidden)


def video_predict(model: Model, inputs: Sequence, horizon: int) -> list[np.ndarray]:
    """Predicted frames as arrays of shape (N, 1, H, W)."""
    return [p.data for p in video_rollout(model, inputs, horizon).predictions]


# ---------------------------------------------------------------------------
# stereo: left view -> horizontal filters -> right view


def build_stereo_net(cfg: StereoNetConfig | dict | None = None, seed=0, dtype=np.float32) -> Model:
    if cfg is None:
        cfg = StereoNetConfig()
    elif isinstance(cfg, dict):
        cfg = StereoNetConfig(**cfg)
    if cfg.height % 4 or cfg.width % 4:
        raise ValueError(f"frame size {cfg.height}x{cfg.width} must be divisible by 4")
    if cfg.filter_width % 2 == 0:
        raise ValueError("filter_width must be odd")
    rng = _rng(seed)
    params: dict[str, Tensor] = {}
    layers: list[dict] = []
    _build_encoder_decoder(
        params, layers, rng, dtype, cfg.enc_channels, cfg.hidden_channels, cfg.filter_width, recurrent=False
    )
    return Model("stereo", {**asdict(cfg), "layers": layers}, params)


def stereo_filters(model: Model, left: Tensor) -> FilterField:
    s = model.arch["filter_width"]
    taps = softmax_over_taps(_decode(model, _encode(model, _as_tensor(left, model.dtype))), s)
    return FilterField(FilterSpec(1, s, 1, 1, "local"), taps)


def stereo_predict(model: Model, left) -> tuple[Tensor, FilterField]:
    """Predicted right view and the horizontal filter field that produced it."""
    left = _as_tensor(left, model.dtype)
    logits = _decode(model, _encode(model, left))
    return softmax_local_filtering(left, logits, FilterSpec(1, model.arch["filter_width"], 1, 1, "local"))
