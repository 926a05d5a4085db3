"""Training data: IDX digit files, moving digits, steerable-filter pairs and
synthetic stereo / driving scenes.

Every generator takes a ``numpy.random.Generator`` and is deterministic given
its state. Batch helpers derive that state from ``(seed, index)`` so any batch
can be regenerated on its own.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import Tensor

__all__ = [
    "IDXFormatError",
    "DigitSet",
    "SequenceBatch",
    "StereoSample",
    "load_mnist_idx",
    "write_idx_images",
    "load_builtin_digits",
    "MovingMnistConfig",
    "bounce_trajectory",
    "gen_moving_mnist",
    "moving_mnist_batch",
    "steerable_basis",
    "steerable_filter",
    "gen_steerable_pair",
    "steerable_batch",
    "StereoConfig",
    "gen_synthetic_stereo",
    "stereo_batch",
    "DrivingConfig",
    "gen_synthetic_driving",
    "driving_batch",
    "batch_rng",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def batch_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for batch ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------------------
# digits


class IDXFormatError(ValueError):
    pass


@dataclass
class DigitSet:
    images: np.ndarray  # (count, 28, 28) float32 in [0, 1]
    labels: np.ndarray | None = None

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        if imgs.ndim != 3 or imgs.shape[1:] != (28, 28):
            raise ValueError(f"digit images must be (count, 28, 28), got {imgs.shape}")
        self.images = np.clip(imgs, 0.0, 1.0)

    def __len__(self) -> int:
        return len(self.images)

    def split(self, n_first: int) -> tuple["DigitSet", "DigitSet"]:
        lab = self.labels
        return (
            DigitSet(self.images[:n_first], None if lab is None else lab[:n_first]),
            DigitSet(self.images[n_first:], None if lab is None else lab[n_first:]),
        )


def load_mnist_idx(path) -> DigitSet:
    """Read an IDX image file (magic 0x00000803, big-endian) scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise IDXFormatError(f"{path}: truncated header, file ends at byte offset {len(raw)}")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        hint = " (this is a label file)" if magic == IDX_LABEL_MAGIC else ""
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0{hint}")
    if (rows, cols) != (28, 28):
        raise IDXFormatError(f"{path}: expected 28x28 images, header at byte offset 8 says {rows}x{cols}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise IDXFormatError(
            f"{path}: truncated pixel data at byte offset {len(raw)}, expected {need} bytes"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return DigitSet(pixels.reshape(count, rows, cols).astype(np.float32) / 255.0)


def write_idx_images(images: np.ndarray, path) -> None:
    """Write uint8 images (count, rows, cols) as an IDX image file."""
    arr = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *arr.shape))
        fh.write(arr.tobytes())


def load_builtin_digits() -> DigitSet:
    """Handwritten digits bundled with scikit-learn, resized to MNIST geometry.

    The 8x8 scans are upsampled to a 20x20 glyph and centred in a 28x28
    frame, matching how MNIST digits sit in their boxes.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    small = d.images.astype(np.float64) / 16.0
    big = np.stack([ndimage.zoom(im, 2.5, order=1) for im in small])
    big = np.clip(big, 0.0, 1.0)
    out = np.zeros((len(big), 28, 28), dtype=np.float32)
    out[:, 4:24, 4:24] = big
    return DigitSet(out, d.target.astype(np.int64))


# ---------------------------------------------------------------------------
# moving digits


@dataclass
class SequenceBatch:
    frames: np.ndarray  # (N, T, 1, H, W)
    t_in: int
    t_out: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 5 or self.frames.shape[2] != 1:
            raise ValueError(f"frames must be (N, T, 1, H, W), got {self.frames.shape}")
        if self.frames.shape[1] != self.t_in + self.t_out:
            raise ValueError("frame count must equal t_in + t_out")

    @property
    def inputs(self) -> list[Tensor]:
        return [Tensor(self.frames[:, t]) for t in range(self.t_in)]

    @property
    def targets(self) -> list[np.ndarray]:
        return [self.frames[:, self.t_in + t] for t in range(self.t_out)]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def subset(self, start: int, stop: int) -> "SequenceBatch":
        meta = {k: v[start:stop] for k, v in self.meta.items()}
        return SequenceBatch(self.frames[start:stop], self.t_in, self.t_out, meta)


@dataclass
class MovingMnistConfig:
    num_digits: int = 2
    frame_size: int = 64
    t_in: int = 10
    t_out: int = 10
    speed_range: tuple[float, float] = (3.0, 5.0)
    digit_size: int = 28


def bounce_trajectory(start: float, velocity: float, limit: float, steps: int):
    """Positions and velocities of a point bouncing inside ``[0, limit]``.

    Position at frame ``t`` is followed by a step of the frame's velocity;
    crossing a wall mirrors the position back inside and flips the velocity.
    """
    pos = np.empty(steps)
    vel = np.empty(steps)
    p, v = float(start), float(velocity)
    for t in range(steps):
        pos[t], vel[t] = p, v
        p += v
        if limit <= 0:
            p = 0.0
            continue
        # steps longer than the range need more than one mirror
        while p < 0 or p > limit:
            if p < 0:
                p, v = -p, -v
            else:
                p, v = 2 * limit - p, -v
    return pos, vel


def gen_moving_mnist(digits: DigitSet, cfg: MovingMnistConfig, rng: np.random.Generator, count: int = 1) -> SequenceBatch:
    if cfg.num_digits < 1:
        raise ValueError("num_digits must be >= 1")
    size, ds = cfg.frame_size, cfg.digit_size
    if ds > size:
        raise ValueError(f"digit size {ds} exceeds frame size {size}")
    lim = size - ds
    steps = cfg.t_in + cfg.t_out
    frames = np.zeros((count, steps, 1, size, size), dtype=np.float32)
    for s in range(count):
        for _ in range(cfg.num_digits):
            img = digits.images[rng.integers(len(digits))]
            x0, y0 = rng.uniform(0, lim, size=2)
            theta = rng.uniform(0, 2 * math.pi)
            speed = rng.uniform(*cfg.speed_range)
            xs, _ = bounce_trajectory(x0, speed * math.cos(theta), lim, steps)
            ys, _ = bounce_trajectory(y0, speed * math.sin(theta), lim, steps)
            for t in range(steps):
                x, y = int(round(xs[t])), int(round(ys[t]))
                view = frames[s, t, 0, y:y + ds, x:x + ds]
                np.maximum(view, img, out=view)
    return SequenceBatch(frames, cfg.t_in, cfg.t_out)


def moving_mnist_batch(digits: DigitSet, cfg: MovingMnistConfig, seed: int, index: int, batch: int) -> SequenceBatch:
    return gen_moving_mnist(digits, cfg, batch_rng(seed, index), count=batch)


# ---------------------------------------------------------------------------
# steerable filters

STEER_SIGMA = 1.5
STEER_SIZE = 9
NOISE_BLUR = 0.5


def steerable_basis(size: int = STEER_SIZE, sigma: float = STEER_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """x- and y-derivative-of-Gaussian filters on a ``size`` x ``size`` grid.

    The Gaussian has unit peak; x grows rightward and y downward, matching
    the tap offsets used by the dynamic layers.
    """
    r = np.arange(size) - size // 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    g = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
    return -xx / sigma**2 * g, -yy / sigma**2 * g


def steerable_filter(angle: float) -> np.ndarray:
    gx, gy = steerable_basis()
    return math.cos(angle) * gx + math.sin(angle) * gy


def gen_steerable_pair(rng: np.random.Generator, angle: float, image_size: int = 32):
    """Smooth noise image, its angle, and the image filtered at that angle.

    Filtering is cross-correlation with zero padding.
    """
    noise = rng.random((image_size, image_size))
    image = ndimage.gaussian_filter(noise, NOISE_BLUR, mode="reflect")
    image = (image - image.mean()) / (image.std() + 1e-12)
    target = ndimage.correlate(image, steerable_filter(angle), mode="constant", cval=0.0)
    return image, angle, target


def steerable_batch(seed: int, index: int, batch: int, image_size: int = 32, dtype=np.float32):
    """``(images, angles, targets)`` with images/targets shaped (N, 1, S, S)."""
    rng = batch_rng(seed, index)
    angles = rng.uniform(0, 2 * math.pi, size=batch)
    pairs = [gen_steerable_pair(rng, a, image_size) for a in angles]
    images = np.stack([p[0] for p in pairs])[:, None].astype(dtype)
    targets = np.stack([p[2] for p in pairs])[:, None].astype(dtype)
    return Tensor(images), angles, targets


# ---------------------------------------------------------------------------
# layered scenes

MAX_STEREO_DISPARITY = 6


def _texture(rng: np.random.Generator, shape, lo: float, hi: float, blur: float = 1.0) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.random(shape), blur, mode="wrap")
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    return lo + (hi - lo) * t


def _blob_mask(rng: np.random.Generator, shape, count: int, min_size: int, max_size: int) -> np.ndarray:
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(count):
        bh = int(rng.integers(min_size, max_size + 1))
        bw = int(rng.integers(min_size, max_size + 1))
        y = int(rng.integers(0, max(1, h - bh + 1)))
        x = int(rng.integers(0, max(1, w - bw + 1)))
        mask[y:y + bh, x:x + bw] = True
    return mask


@dataclass
class StereoSample:
    left: np.ndarray  # (1, 1, H, W)
    right: np.ndarray
    disparity: np.ndarray  # per right-view pixel: right(i, j) == left(i, j + d)


@dataclass
class StereoConfig:
    height: int = 64
    width: int = 128
    disparities: tuple[int, ...] = (0, 2, 4)
    objects_per_layer: int = 3
    full_frame: bool = False


def gen_synthetic_stereo(rng: np.random.Generator, cfg: StereoConfig | None = None) -> StereoSample:
    """Layered scene seen from two horizontally displaced cameras.

    Layer ``k`` (farthest first) has disparity ``cfg.disparities[k]`` and its
    own intensity band, so depth is recognisable from appearance alone. The
    right view takes each layer's texture shifted left by its disparity;
    nearer layers occlude farther ones. Layer 0 fills the frame, other
    layers are rectangles unless ``cfg.full_frame`` is set.
    """
    cfg = cfg or StereoConfig()
    disps = tuple(int(d) for d in cfg.disparities)
    if any(d < 0 or d > MAX_STEREO_DISPARITY for d in disps):
        raise ValueError(f"disparities must lie in [0, {MAX_STEREO_DISPARITY}], got {disps}")
    h, w = cfg.height, cfg.width
    wide = w + MAX_STEREO_DISPARITY
    n_layers = len(disps)
    left = np.zeros((h, w))
    right = np.zeros((h, w))
    disparity = np.zeros((h, w))
    for k, d in enumerate(disps):
        band = (k / n_layers, (k + 1) / n_layers)
        tex = _texture(rng, (h, wide), band[0] + 0.02, band[1] - 0.02)
        if k == 0 or cfg.full_frame:
            mask = np.ones((h, wide), dtype=bool)
        else:
            mask = _blob_mask(rng, (h, wide), cfg.objects_per_layer, h // 6, h // 2)
        ml = mask[:, :w]
        left[ml] = tex[:, :w][ml]
        mr = mask[:, d:d + w]
        right[mr] = tex[:, d:d + w][mr]
        disparity[mr] = d
    as4 = lambda a: a[None, None].astype(np.float32)
    return StereoSample(as4(left), as4(right), as4(disparity))


def stereo_batch(seed: int, index: int, batch: int, cfg: StereoConfig | None = None):
    """``(left, right, disparity)`` arrays shaped (N, 1, H, W)."""
    rng = batch_rng(seed, index)
    samples = [gen_synthetic_stereo(rng, cfg) for _ in range(batch)]
    cat = lambda name: np.concatenate([getattr(s, name) for s in samples])
    return cat("left"), cat("right"), cat("disparity")


@dataclass
class DrivingConfig:
    height: int = 32
    width: int = 32
    t_in: int = 3
    t_out: int = 3
    velocity_range: tuple[int, int] = (1, 2)
    # tunnel-entry dimming; milder ramps stay within local texture contrast,
    # where softmax filters can imitate them by weighting darker neighbours
    ramp_range: tuple[float, float] | None = (0.05, 0.3)
    zero_velocity: bool = False
    objects: int = 2


def gen_synthetic_driving(rng: np.random.Generator, cfg: DrivingConfig | None = None, count: int = 1) -> SequenceBatch:
    """Two textured layers drifting at constant integer velocities, optionally
    dimmed by a global multiplicative ramp.

    With ramp factor ``f`` over ``T`` frames, frame ``t`` is scaled by
    ``1 - (1 - f) * t / (T - 1)``.
    """
    cfg = cfg or DrivingConfig()
    steps = cfg.t_in + cfg.t_out
    h, w = cfg.height, cfg.width
    vmax = max(abs(cfg.velocity_range[0]), abs(cfg.velocity_range[1]))
    margin = vmax * steps
    frames = np.zeros((count, steps, 1, h, w), dtype=np.float32)
    velocities, factors = [], []
    for s in range(count):
        layers = []
        for k in range(2):
            if cfg.zero_velocity:
                vel = (0, 0)
            else:
                mag = rng.integers(cfg.velocity_range[0], cfg.velocity_range[1] + 1, size=2)
                sign = rng.choice([-1, 1], size=2)
                vel = (int(mag[0] * sign[0]), int(mag[1] * sign[1]))
            canvas_shape = (h + 2 * margin, w + 2 * margin)
            tex = _texture(rng, canvas_shape, 0.05 + 0.45 * k, 0.5 + 0.45 * k)
            if k == 0:
                mask = np.ones(canvas_shape, dtype=bool)
            else:
                mask = _blob_mask(rng, canvas_shape, cfg.objects * 4, h // 5, h // 2)
            layers.append((tex, mask, vel))
        factor = 1.0 if cfg.ramp_range is None else float(rng.uniform(*cfg.ramp_range))
        velocities.append([vel for _, _, vel in layers])
        factors.append(factor)
        for t in range(steps):
            img = np.zeros((h, w))
            for tex, mask, (vy, vx) in layers:
                # content moves by (vy, vx) per frame
                y0, x0 = margin - vy * t, margin - vx * t
                m = mask[y0:y0 + h, x0:x0 + w]
                img[m] = tex[y0:y0 + h, x0:x0 + w][m]
            light = 1.0 - (1.0 - factor) * t / (steps - 1)
            frames[s, t, 0] = img * light
    return SequenceBatch(frames, cfg.t_in, cfg.t_out, {"velocities": velocities, "ramp": factors})


def driving_batch(seed: int, index: int, batch: int, cfg: DrivingConfig | None = None) -> SequenceBatch:
    return gen_synthetic_driving(batch_rng(seed, index), cfg, count=batch)
