"""Task recipes: data sources, pinned test sets, metrics and baselines.

These tie the generators, models and training loop together for the four
tasks (steerable, mnist, driving, stereo) and are shared by the CLI, the demo
scripts and the acceptance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import datagen, models
from .autodiff import Tensor
from .dynops import FilterField
from .flowviz import filters_to_flow
from .training import bce_loss, euclidean_loss

TASKS = ("steerable", "mnist", "driving", "stereo")

# seeds for the fixed evaluation sets; training streams use the run seed
TEST_SEED = 20161
TEST_SEQUENCES = 1000
BUILTIN_TRAIN_DIGITS = 1500


def _frame_loss(kind: str):
    return {"bce": bce_loss, "euclidean": euclidean_loss}[kind]


# ---------------------------------------------------------------------------
# steerable


def steerable_source(seed: int, batch: int, image_size: int = 32):
    return lambda step: datagen.steerable_batch(seed, step, batch, image_size)


@dataclass
class SteerableReport:
    mse: float
    target_var: float
    cos_sims: dict[float, float]

    @property
    def relative_mse(self) -> float:
        return self.mse / self.target_var


def evaluate_steerable(model, count: int = 256, image_size: int = 32, seed: int = TEST_SEED) -> SteerableReport:
    images, angles, targets = datagen.steerable_batch(seed, 0, count, image_size, dtype=model.dtype)
    out = models.steerable_forward(model, images, angles).data
    mse = float(np.mean((out - targets) ** 2))
    cos = {}
    for deg in (0.0, 45.0, 90.0):
        a = math.radians(deg)
        learned = models.steerable_filters(model, [a]).taps.data.ravel().astype(np.float64)
        ref = datagen.steerable_filter(a).ravel()
        cos[deg] = float(learned @ ref / (np.linalg.norm(learned) * np.linalg.norm(ref) + 1e-300))
    return SteerableReport(mse, float(np.var(targets)), cos)


# ---------------------------------------------------------------------------
# moving digits


def load_digits(path: str | None = None) -> tuple[datagen.DigitSet, datagen.DigitSet]:
    """(train, test) digit pools. Without an IDX path the bundled scans are split."""
    if path:
        digits = datagen.load_mnist_idx(path)
        cut = int(len(digits) * 0.9)
    else:
        digits = _builtin_digits()
        cut = BUILTIN_TRAIN_DIGITS
    return digits.split(cut)


@lru_cache(maxsize=1)
def _builtin_digits() -> datagen.DigitSet:
    return datagen.load_builtin_digits()


def mnist_source(digits: datagen.DigitSet, cfg: datagen.MovingMnistConfig, seed: int, batch: int):
    return lambda step: datagen.moving_mnist_batch(digits, cfg, seed, step, batch)


def mnist_test_set(
    digits: datagen.DigitSet,
    num_digits: int = 2,
    count: int = TEST_SEQUENCES,
    seed: int = TEST_SEED,
    frame_size: int = 64,
) -> datagen.SequenceBatch:
    cfg = datagen.MovingMnistConfig(num_digits=num_digits, frame_size=frame_size)
    return datagen.gen_moving_mnist(digits, cfg, np.random.default_rng([seed, num_digits]), count=count)


def evaluate_video(model, seqs: datagen.SequenceBatch, kind: str = "bce", batch: int = 16) -> float:
    """Per-frame loss averaged over predicted frames and sequences."""
    fn = _frame_loss(kind)
    total = 0.0
    for start in range(0, len(seqs), batch):
        part = seqs.subset(start, start + batch)
        preds = models.video_predict(model, part.inputs, part.t_out)
        frame_losses = [float(fn(Tensor(p), t).data) for p, t in zip(preds, part.targets)]
        total += np.mean(frame_losses) * len(part)
    return total / len(seqs)


def copy_last_baseline(seqs: datagen.SequenceBatch, kind: str = "bce") -> float:
    """Same metric when every future frame is predicted as the last input frame."""
    fn = _frame_loss(kind)
    last = Tensor(seqs.frames[:, seqs.t_in - 1])
    per_frame = [float(fn(last, t).data) for t in seqs.targets]
    return float(np.mean(per_frame))


# ---------------------------------------------------------------------------
# driving


def driving_source(cfg: datagen.DrivingConfig, seed: int, batch: int):
    return lambda step: datagen.driving_batch(seed, step, batch, cfg)


def driving_test_set(cfg: datagen.DrivingConfig, count: int = 256, seed: int = TEST_SEED) -> datagen.SequenceBatch:
    return datagen.gen_synthetic_driving(np.random.default_rng([seed, 7]), cfg, count=count)


# ---------------------------------------------------------------------------
# stereo


def stereo_source(cfg: datagen.StereoConfig, seed: int, batch: int):
    def source(step):
        left, right, _ = datagen.stereo_batch(seed, step, batch, cfg)
        return Tensor(left), right
    return source


def stereo_test_set(cfg: datagen.StereoConfig, count: int = 64, seed: int = TEST_SEED):
    return datagen.stereo_batch(seed, 10**6, count, cfg)


@dataclass
class StereoReport:
    loss: float
    baseline: float
    ordering_fraction: float
    mean_abs_u: dict[int, float]


def evaluate_stereo(model, test, disparities, batch: int = 16) -> StereoReport:
    """Euclidean loss, copy-left baseline, and how often the nearest layer's
    mean |u| exceeds the farthest layer's."""
    left, right, disp = test
    near, far = max(disparities), min(disparities)
    losses, wins, counted = [], 0, 0
    per_layer: dict[int, list[float]] = {int(d): [] for d in disparities}
    for start in range(0, len(left), batch):
        sl = slice(start, start + batch)
        pred, fld = models.stereo_predict(model, left[sl])
        losses.append(float(euclidean_loss(pred, right[sl]).data) * len(left[sl]))
        flow = filters_to_flow(fld)
        au = np.abs(flow.u)
        for i in range(au.shape[0]):
            d_i = disp[sl][i]
            means = {}
            for d in per_layer:
                m = d_i == d
                if m.any():
                    means[d] = float(au[i][m].mean())
                    per_layer[d].append(means[d])
            if near in means and far in means:
                counted += 1
                wins += means[near] > means[far]
    baseline = float(euclidean_loss(Tensor(left), right).data)
    return StereoReport(
        float(np.sum(losses) / len(left)),
        baseline,
        wins / counted if counted else float("nan"),
        {d: float(np.mean(v)) if v else float("nan") for d, v in per_layer.items()},
    )


def expected_shift(field_: FilterField) -> np.ndarray:
    """Per-pixel |u| + |v| of a local field."""
    flow = filters_to_flow(field_)
    return np.abs(flow.u) + np.abs(flow.v)
