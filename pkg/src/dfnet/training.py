"""Losses, initialization, Adam, the training loop and checkpoint files."""

from __future__ import annotations

import ctypes
import ctypes.util
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from . import models as _models
from .autodiff import Tape, Tensor, backward, record
from .dynops import FilterField, tap_offsets

logger = logging.getLogger(__name__)

__all__ = [
    "BCE_CLAMP",
    "bce_loss",
    "euclidean_loss",
    "sequence_loss",
    "smoothness_penalty",
    "he_init",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "TrainingDiverged",
    "TrainResult",
    "train",
    "task_loss",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "write_metrics_log",
]

BCE_CLAMP = 1e-7


def _per_item_check(pred: Tensor, target, what: str) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ValueError(f"{what}: prediction {pred.shape} and target {t.shape} differ")
    return t


def bce_loss(pred: Tensor, target, clamp: float = BCE_CLAMP) -> Tensor:
    """Binary cross-entropy summed over each item's pixels, averaged over the batch.

    ``pred`` is clamped to ``[clamp, 1 - clamp]`` before the logs; the
    gradient is zero where the clamp is active.
    """
    p = _per_item_check(pred, target, "bce_loss")
    n = pred.shape[0]
    q = np.clip(pred.data, clamp, 1 - clamp)
    value = -(p * np.log(q) + (1 - p) * np.log1p(-q)).sum() / n
    inside = (pred.data >= clamp) & (pred.data <= 1 - clamp)

    def _backward(g):
        return (g * inside * (q - p) / (q * (1 - q)) / n,)

    return record("bce_loss", (pred,), np.asarray(value, dtype=pred.dtype), _backward)


def euclidean_loss(pred: Tensor, target) -> Tensor:
    """Half the summed squared error per item, averaged over the batch."""
    p = _per_item_check(pred, target, "euclidean_loss")
    n = pred.shape[0]
    diff = pred.data - p
    value = 0.5 * (diff * diff).sum() / n
    return record(
        "euclidean_loss", (pred,), np.asarray(value, dtype=pred.dtype), lambda g: (g * diff / n,)
    )


_LOSSES = {"bce": bce_loss, "euclidean": euclidean_loss}


def sequence_loss(preds: list[Tensor], targets: list, kind: str = "bce", reduction: str = "mean") -> Tensor:
    """Per-frame loss, averaged (``reduction="mean"``) or summed over frames."""
    if len(preds) != len(targets) or not preds:
        raise ValueError(f"need matching non-empty frame lists, got {len(preds)} and {len(targets)}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    fn = _LOSSES[kind]
    acc = fn(preds[0], targets[0])
    for q, p in zip(preds[1:], targets[1:]):
        acc = acc + fn(q, p)
    return acc if reduction == "sum" else acc * (1.0 / len(preds))


def smoothness_penalty(field_: FilterField) -> Tensor:
    """Total variation of each filter's expected-offset map, averaged over the batch.

    Convolutional fields carry one filter per sample and score zero.
    """
    taps = field_.taps
    if field_.mode == "convolutional":
        return Tensor(np.zeros((), dtype=taps.dtype))
    spec = field_.spec
    n_b, _, h, w = taps.shape
    dy, dx = tap_offsets(spec.s_h, spec.s_w)
    dy = np.tile(dy, spec.c_b).astype(taps.dtype)[None, None, :, None, None]
    dx = np.tile(dx, spec.c_b).astype(taps.dtype)[None, None, :, None, None]
    t = taps.data.reshape(n_b, spec.n, spec.taps_per_filter, h, w)
    u = (t * dx).sum(axis=2)
    v = (t * dy).sum(axis=2)

    def tv(m):
        di = m[:, :, :-1, :] - m[:, :, 1:, :]
        dj = m[:, :, :, :-1] - m[:, :, :, 1:]
        return np.abs(di).sum() + np.abs(dj).sum(), np.sign(di), np.sign(dj)

    tu, su_i, su_j = tv(u)
    tv_, sv_i, sv_j = tv(v)
    value = (tu + tv_) / n_b

    def grad_map(si, sj):
        g = np.zeros((n_b, spec.n, h, w), dtype=taps.dtype)
        g[:, :, :-1, :] += si
        g[:, :, 1:, :] -= si
        g[:, :, :, :-1] += sj
        g[:, :, :, 1:] -= sj
        return g

    def _backward(g):
        gu = grad_map(su_i, su_j)[:, :, None]
        gv = grad_map(sv_i, sv_j)[:, :, None]
        return ((g / n_b * (gu * dx + gv * dy)).reshape(taps.shape),)

    return record("smoothness_penalty", (taps,), np.asarray(value, dtype=taps.dtype), _backward)


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32, name: str | None = None) -> Tensor:
    """Zero-mean normal weights with standard deviation sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update. Parameter arrays are replaced, not mutated."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters: {missing}")
    if not state.m:
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        m = state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    lr: float = 1e-3
    iterations: int = 20000
    batch: int = 16
    loss: str = "bce"
    smoothness: float = 0.0
    seed: int = 0
    eval_every: int = 0
    teacher_forcing: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.loss not in _LOSSES:
            raise ValueError(f"loss must be one of {sorted(_LOSSES)}, got {self.loss!r}")
        if self.smoothness < 0:
            raise ValueError("smoothness weight must be >= 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, seed: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (batch seed ({seed}, {step}))")
        self.step = step
        self.seed = seed


@dataclass
class TrainResult:
    model: Any
    log: list[tuple[int, float, float | None]]
    adam: AdamState


def task_loss(model, batch, cfg: TrainConfig) -> Tensor:
    """Scalar training loss for ``model`` on one batch, dispatched on model kind."""
    kind = model.kind
    if kind == "steerable":
        images, angles, targets = batch
        out = _models.steerable_forward(model, images, angles)
        return _LOSSES[cfg.loss](out, targets)
    if kind in ("video", "video_bias"):
        forcing = batch.targets if cfg.teacher_forcing else None
        roll = _models.video_rollout(model, batch.inputs, batch.t_out, forced=forcing)
        loss = sequence_loss(roll.predictions, batch.targets, cfg.loss)
        if cfg.smoothness > 0:
            pen = smoothness_penalty(roll.fields[0])
            for f in roll.fields[1:]:
                pen = pen + smoothness_penalty(f)
            loss = loss + pen * (cfg.smoothness / len(roll.fields))
        return loss
    if kind == "stereo":
        left, right = batch
        pred, fld = _models.stereo_predict(model, left)
        loss = _LOSSES[cfg.loss](pred, right)
        if cfg.smoothness > 0:
            loss = loss + smoothness_penalty(fld) * cfg.smoothness
        return loss
    raise ValueError(f"unknown model kind {kind!r}")


def _keep_large_blocks() -> None:
    """Stop glibc from returning big freed blocks to the kernel.

    Each step allocates and frees several hundred MB of im2col buffers; with
    the default thresholds every one is a fresh mmap whose pages fault in
    again, which costs more system time than some of the layers themselves.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return
    try:
        mallopt = ctypes.CDLL(name).mallopt
    except (OSError, AttributeError):
        return
    m_trim_threshold, m_mmap_threshold = -1, -3
    mallopt(m_mmap_threshold, 1 << 30)
    mallopt(m_trim_threshold, (1 << 31) - 1)


def train(
    model,
    source: Callable[[int], Any],
    cfg: TrainConfig,
    evaluate: Callable[[Any], float] | None = None,
    log_path: str | os.PathLike | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps on batches ``source(step)``.

    Returns the trained model (updated in place), the per-step log of
    ``(step, loss, eval)`` and the optimizer state.
    """
    _keep_large_blocks()
    params = model.params
    state = AdamState.for_params(params)
    log: list[tuple[int, float, float | None]] = []
    for step in range(1, cfg.iterations + 1):
        batch = source(step)
        with Tape() as tape:
            loss = task_loss(model, batch, cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, cfg.seed, value)
        gmap = backward(tape, loss)
        del tape
        grads = {k: gmap[p] for k, p in params.items()}
        adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        ev = None
        if evaluate is not None and cfg.eval_every and step % cfg.eval_every == 0:
            ev = float(evaluate(model))
        log.append((step, value, ev))
        if progress_every and step % progress_every == 0:
            logger.info("step %d loss %.6g%s", step, value, "" if ev is None else f" eval {ev:.6g}")
    if log_path is not None:
        write_metrics_log(log, log_path)
    return TrainResult(model, log, state)


def write_metrics_log(log: Iterable[tuple[int, float, float | None]], path) -> None:
    with open(path, "w") as fh:
        for step, value, ev in log:
            fh.write(f"{step}\t{value!r}\t{'-' if ev is None else repr(ev)}\n")


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"DFN1" | u32 version | u32 len + utf-8 JSON arch | u32 tensor count
#   per tensor: u32 len + utf-8 name | u32 rank | u32 dims... | u8 precision | raw values
#   u8 has_adam [| u64 step | u32 count | tensors named "m/<p>" and "v/<p>"]

CHECKPOINT_MAGIC = b"DFN1"
CHECKPOINT_VERSION = 1
_PRECISION = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_PRECISION_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    if arr.dtype not in _PRECISION:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
    raw = name.encode()
    fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", _PRECISION[arr.dtype]))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(model, path, adam: AdamState | None = None) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    arch = json.dumps({"kind": model.kind, "arch": model.arch}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(arch)) + arch)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        _write_tensor(buf, name, p.data)
    if adam is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<QI", adam.t, 2 * len(adam.m)))
        for name in adam.m:
            _write_tensor(buf, f"m/{name}", adam.m[name])
            _write_tensor(buf, f"v/{name}", adam.v[name])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (ln,) = self.unpack("<I")
        name = self.take(ln).decode()
        (rank,) = self.unpack("<I")
        dims = self.unpack(f"<{rank}I") if rank else ()
        (tag,) = self.unpack("<B")
        if tag not in _PRECISION_DTYPE:
            raise CheckpointError(f"unknown precision tag {tag} for {name!r}")
        dt = _PRECISION_DTYPE[tag]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(dims)
        return name, arr.astype(dt.newbyteorder("="))


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, adam_state_or_None)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DFN1 checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (ln,) = r.unpack("<I")
    header = json.loads(r.take(ln).decode())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name, arr = r.tensor()
        params[name] = Tensor(arr, requires_grad=True, name=name)
    (has_adam,) = r.unpack("<B")
    adam = None
    if has_adam:
        t, n = r.unpack("<QI")
        adam = AdamState(t=t)
        for _ in range(n):
            name, arr = r.tensor()
            slot, pname = name.split("/", 1)
            (adam.m if slot == "m" else adam.v)[pname] = arr
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return _models.Model(header["kind"], header["arch"], params), adam
