"""Finite-difference gradient suite over every differentiable primitive.

Each case builds a small random double-precision graph, reduces it to a
scalar through a fixed random projection (so no gradient entry is trivially
zero), and runs :func:`dfnet.autodiff.gradient_check`. Used by the
``gradcheck`` CLI command and by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynops import (
    FilterField,
    FilterSpec,
    dynamic_convolution,
    dynamic_local_filtering,
    dynamic_pixel_bias,
    separable_dynamic_filtering,
)
from .training import bce_loss, euclidean_loss

# Largest step the checker allows: central-difference truncation error stays
# below 1e-8 on these inputs while rounding noise shrinks with the step.
EPS = 1e-4
TOLERANCE = 1e-4


def _leaf(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    # keeps relu inputs clear of the kink by more than the probe step
    mag = rng.uniform(0.05, 1.0, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: ad.total(ad.mul(y, w))


def _case(fn: Callable[..., Tensor], leaves: list[Tensor], rng) -> ad.GradCheckReport:
    probe = _project(fn(*leaves), rng)
    return ad.gradient_check(lambda *ls: probe(fn(*ls)), leaves, eps=EPS)


def _conv2d(rng):
    stride = int(rng.integers(1, 3))
    x = _leaf(rng, 2, 2, 5, 5)
    w = _leaf(rng, 3, 2, 3, 3)
    b = _leaf(rng, 3)
    return _case(lambda x, w, b: ad.conv2d(x, w, b, stride=stride, pad=1), [x, w, b], rng)


def _fully_connected(rng):
    x = _leaf(rng, 3, 4, 1, 1)
    w = _leaf(rng, 5, 4)
    b = _leaf(rng, 5)
    return _case(ad.fully_connected, [x, w, b], rng)


def _relu(rng):
    return _case(ad.relu, [_away_from_zero(rng, 2, 3, 4, 4)], rng)


def _sigmoid(rng):
    return _case(ad.sigmoid, [_leaf(rng, 2, 3, 4, 4, lo=-4, hi=4)], rng)


def _tanh(rng):
    return _case(ad.tanh, [_leaf(rng, 2, 3, 4, 4, lo=-3, hi=3)], rng)


def _softmax(rng):
    x = _leaf(rng, 2, 18, 3, 3, lo=-3, hi=3)
    return _case(lambda t: ad.softmax_over_taps(t, 9), [x], rng)


def _upsample(rng):
    return _case(lambda t: ad.upsample_nearest(t, 2), [_leaf(rng, 2, 2, 3, 3)], rng)


def _dynamic_convolution(rng):
    spec = FilterSpec(3, 3, n=2, c_b=2, mode="convolutional")
    x = _leaf(rng, 2, 2, 5, 5)
    taps = _leaf(rng, 2, spec.channels, 1, 1)
    return _case(lambda x, t: dynamic_convolution(x, FilterField(spec, t)), [x, taps], rng)


def _dynamic_local(rng):
    n = int(rng.integers(1, 3))
    spec = FilterSpec(3, 3, n=n, c_b=2, mode="local")
    x = _leaf(rng, 2, 2, 4, 5)
    taps = _leaf(rng, 2, spec.channels, 4, 5)
    return _case(lambda x, t: dynamic_local_filtering(x, FilterField(spec, t)), [x, taps], rng)


def _separable(rng):
    hs, vs = FilterSpec(1, 5), FilterSpec(3, 1)
    x = _leaf(rng, 2, 1, 5, 6)
    th = _leaf(rng, 2, hs.channels, 5, 6)
    tv = _leaf(rng, 2, vs.channels, 5, 6)
    return _case(
        lambda x, a, b: separable_dynamic_filtering(x, FilterField(hs, a), FilterField(vs, b)),
        [x, th, tv], rng,
    )


def _pixel_bias(rng):
    return _case(dynamic_pixel_bias, [_leaf(rng, 2, 1, 4, 4), _leaf(rng, 2, 1, 4, 4)], rng)


def _bce(rng):
    pred = _leaf(rng, 2, 1, 4, 4, lo=0.05, hi=0.95)
    # targets kept 0.1 away from predictions: where they coincide the exact
    # gradient is zero and a relative error is meaningless
    side = rng.choice([-1.0, 1.0], size=pred.shape)
    gap = rng.uniform(0.1, 0.5, size=pred.shape)
    target = pred.data + side * gap
    target = np.where((target < 0) | (target > 1), pred.data - side * gap, target)
    target = np.clip(target, 0.0, 1.0)
    return ad.gradient_check(lambda p: bce_loss(p, target), [pred], eps=EPS)


def _euclidean(rng):
    pred = _leaf(rng, 2, 1, 4, 4)
    target = rng.uniform(-1, 1, size=(2, 1, 4, 4))
    return ad.gradient_check(lambda p: euclidean_loss(p, target), [pred], eps=EPS)


CASES: dict[str, Callable[[np.random.Generator], ad.GradCheckReport]] = {
    "conv2d": _conv2d,
    "fully_connected": _fully_connected,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "tanh": _tanh,
    "softmax_over_taps": _softmax,
    "upsample_nearest": _upsample,
    "dynamic_convolution": _dynamic_convolution,
    "dynamic_local_filtering": _dynamic_local,
    "separable_dynamic_filtering": _separable,
    "dynamic_pixel_bias": _pixel_bias,
    "bce_loss": _bce,
    "euclidean_loss": _euclidean,
}


@dataclass
class SuiteResult:
    per_op: dict[str, float]
    seeds: int

    @property
    def max_rel_error(self) -> float:
        return max(self.per_op.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(seeds: int = 20, ops: list[str] | None = None, base_seed: int = 0) -> SuiteResult:
    """Worst relative error per op over ``seeds`` random instances."""
    names = list(CASES) if ops is None else ops
    unknown = set(names) - set(CASES)
    if unknown:
        raise ValueError(f"unknown ops {sorted(unknown)}; choose from {list(CASES)}")
    per_op = {}
    for i, name in enumerate(names):
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, i, s])
            worst = max(worst, CASES[name](rng).max_rel_error)
        per_op[name] = worst
    return SuiteResult(per_op, seeds)
