"""Flow-style views of generated filters, and minimal PGM/PPM output.

Each local filter is summarized by the expected displacement of its taps,
``(sum_k w_k dx_k, sum_k w_k dy_k)``, with x pointing right and y down. The
resulting field is colored on an HSV wheel: hue is the direction, saturation
the magnitude relative to ``max_mag``, value fixed at 1, so zero flow is
white.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynops import FilterField, tap_offsets

__all__ = [
    "FlowMap",
    "RasterImage",
    "filters_to_flow",
    "flow_to_color",
    "hsv_to_rgb",
    "to_raster",
    "write_pgm",
    "write_ppm",
    "write_pnm",
    "read_pnm",
    "montage",
]


@dataclass
class FlowMap:
    u: np.ndarray  # (N, 1, H, W) x-shift in pixels
    v: np.ndarray  # (N, 1, H, W) y-shift in pixels


@dataclass
class RasterImage:
    samples: np.ndarray  # (H, W, C) uint8

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3 or s.shape[2] not in (1, 3):
            raise ValueError(f"raster must be (H, W, 1|3), got {s.shape}")
        self.samples = np.ascontiguousarray(s, dtype=np.uint8)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]


def filters_to_flow(field: FilterField) -> FlowMap:
    if field.mode != "local":
        raise ValueError("flow maps are defined for local filter fields")
    spec = field.spec
    if spec.n * spec.c_b != 1:
        raise ValueError(f"flow maps need a single filter on a single channel, got n={spec.n}, c_b={spec.c_b}")
    dy, dx = tap_offsets(spec.s_h, spec.s_w)
    w = field.taps.data.astype(np.float64)
    u = np.tensordot(dx.astype(np.float64), w, axes=([0], [1]))[:, None]
    v = np.tensordot(dy.astype(np.float64), w, axes=([0], [1]))[:, None]
    return FlowMap(u, v)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV to RGB; hue in turns [0, 1), result in [0, 1]."""
    h6 = (np.asarray(h) % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(np.shape(h6) + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        rgb[sel, 0] = np.broadcast_to(r, sel.shape)[sel]
        rgb[sel, 1] = np.broadcast_to(g, sel.shape)[sel]
        rgb[sel, 2] = np.broadcast_to(b, sel.shape)[sel]
    return rgb


def flow_to_color(u: np.ndarray, v: np.ndarray | None = None, max_mag: float | None = None) -> RasterImage:
    """Color one (H, W) flow field. Accepts a FlowMap (first item) or u, v arrays."""
    if isinstance(u, FlowMap):
        u, v = u.u, u.v
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    while u.ndim > 2:
        u, v = u[0], v[0]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max())
    sat = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    hue = np.arctan2(v, u) / (2 * np.pi)
    rgb = hsv_to_rgb(hue, sat, np.ones_like(sat))
    return RasterImage(np.round(rgb * 255).astype(np.uint8))


def to_raster(frame: np.ndarray) -> RasterImage:
    """Gray image from values in [0, 1] (extra leading axes of size 1 are dropped)."""
    a = np.asarray(frame, dtype=np.float64)
    while a.ndim > 2:
        a = a[0]
    return RasterImage(np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8))


def write_pnm(image: RasterImage, path) -> None:
    magic = {1: b"P5", 3: b"P6"}.get(image.channels)
    if magic is None:
        raise ValueError(f"PNM output supports 1 or 3 channels, got {image.channels}")
    header = magic + b"\n%d %d\n255\n" % (image.width, image.height)
    try:
        with open(path, "wb") as fh:
            fh.write(header + image.samples.tobytes())
    except OSError as exc:
        raise OSError(f"could not write {os.fspath(path)}: {exc.strerror}") from exc


def write_pgm(image: RasterImage, path) -> None:
    if image.channels != 1:
        raise ValueError(f"PGM needs a single-channel image, got {image.channels} channels")
    write_pnm(image, path)


def write_ppm(image: RasterImage, path) -> None:
    if image.channels != 3:
        raise ValueError(f"PPM needs a 3-channel image, got {image.channels} channels")
    write_pnm(image, path)


def read_pnm(path) -> RasterImage:
    """Read binary P5/P6 files as written by :func:`write_pnm`."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h = (int(x) for x in parts[1].split())
    channels = 1 if parts[0] == b"P5" else 3
    body = np.frombuffer(parts[3], dtype=np.uint8)
    if body.size != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} samples, found {body.size}")
    return RasterImage(body.reshape(h, w, channels))


def montage(frames: Sequence[RasterImage], cols: int, gap: int = 2) -> RasterImage:
    """Row-major grid of equally sized images with black separators between cells."""
    if not frames:
        raise ValueError("montage needs at least one frame")
    h, w = frames[0].height, frames[0].width
    if any((f.height, f.width) != (h, w) for f in frames):
        raise ValueError("montage frames must share one size")
    channels = max(f.channels for f in frames)
    cols = max(1, min(cols, len(frames)))
    rows = -(-len(frames) // cols)
    out = np.zeros((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap, channels), dtype=np.uint8)
    for idx, f in enumerate(frames):
        r, c = divmod(idx, cols)
        y, x = r * (h + gap), c * (w + gap)
        out[y:y + h, x:x + w] = np.broadcast_to(f.samples, (h, w, channels))
    return RasterImage(out)
