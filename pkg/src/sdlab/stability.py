"""Instability analysis: one masked init, two data orderings, a linear path
between the trained results, and the loss barrier along it."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .nn import ModelState, TrainConfig, evaluate, mix_params, train
from .pruning import SparsityMask, rewind, sparsity

DEFAULT_NUM_ALPHAS = 21
DEFAULT_TOLERANCE = 0.02
RATIO_EPS = 1e-8


class SameOrderingError(ValueError):
    """Both runs would see the same data ordering."""


@dataclass(eq=False)
class InterpolationCurve:
    alphas: np.ndarray
    train_loss: np.ndarray
    val_accuracy: np.ndarray
    endpoint_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.train_loss = np.asarray(self.train_loss, dtype=np.float64)
        self.val_accuracy = np.asarray(self.val_accuracy, dtype=np.float64)
        n = self.alphas.size
        if self.train_loss.size != n or self.val_accuracy.size != n:
            raise ValueError("curve vectors must have equal length")
        if n < 2 or self.alphas[0] != 0.0 or self.alphas[-1] != 1.0:
            raise ValueError("alphas must start at 0 and end at 1")
        if not (np.diff(self.alphas) > 0).all():
            raise ValueError("alphas must be strictly increasing")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "train_loss", "val_accuracy"])
            for row in zip(self.alphas, self.train_loss, self.val_accuracy):
                w.writerow([repr(float(v)) for v in row])


class BarrierHeights(NamedTuple):
    halfway: float
    max: float
    # True when 0.5 was not sampled and the halfway loss was interpolated
    halfway_interpolated: bool = False


@dataclass
class StabilityReport:
    barrier_halfway: float
    barrier_max: float
    stable: bool
    tolerance: float
    sparsity: float | None = None
    halfway_interpolated: bool = False


class BarrierRatio(NamedTuple):
    value: float
    # denominator below 1e-8 in magnitude; value is NaN
    degenerate: bool


def _evaluate_path(a: ModelState, b: ModelState, train_data, val_data, num_alphas: int):
    last = num_alphas - 1
    alphas, losses, accs = [], [], []
    for i in range(num_alphas):
        # integer weights keep curve(a, b) the exact reverse of curve(b, a)
        point = mix_params(a, b, (last - i) / last, i / last)
        loss = evaluate(point, train_data)[0]
        acc = evaluate(point, val_data)[1]
        alphas.append(i / last)
        losses.append(loss)
        accs.append(acc)
    return alphas, losses, accs


def interpolation_curve(a: ModelState, b: ModelState, train_data, val_data=None, num_alphas: int = DEFAULT_NUM_ALPHAS, meta=None) -> InterpolationCurve:
    """Loss/accuracy at evenly spaced points on the segment from ``a`` to ``b``."""
    if num_alphas < 3:
        raise ValueError("num_alphas must be >= 3")
    alphas, losses, accs = _evaluate_path(a, b, train_data, val_data if val_data is not None else train_data, num_alphas)
    return InterpolationCurve(alphas, losses, accs, dict(meta or {}))


def train_pair(init: ModelState, mask: SparsityMask | None, data, seed_a: int, seed_b: int, cfg: TrainConfig):
    """Train two copies of the masked init that differ only in data ordering."""
    if seed_a == seed_b:
        raise SameOrderingError(f"seed_a and seed_b must differ (both {seed_a})")
    start = rewind(init, mask) if mask is not None else init
    a = train(start, data, replace(cfg, ordering_seed=int(seed_a)), mask)
    b = train(start, data, replace(cfg, ordering_seed=int(seed_b)), mask)
    return a, b


def instability_analysis(
    init: ModelState,
    mask: SparsityMask | None,
    data,
    seed_a: int,
    seed_b: int,
    cfg: TrainConfig,
    num_alphas: int = DEFAULT_NUM_ALPHAS,
    val=None,
) -> InterpolationCurve:
    """Train under orderings ``seed_a`` and ``seed_b`` and return the full-train-set
    loss along the straight line between the two results."""
    if num_alphas < 3:
        raise ValueError("num_alphas must be >= 3")
    a, b = train_pair(init, mask, data, seed_a, seed_b, cfg)
    meta = {
        "sparsity": sparsity(mask) if mask is not None else 0.0,
        "ordering_seeds": [int(seed_a), int(seed_b)],
        "dataset": getattr(data, "name", ""),
    }
    return interpolation_curve(a.model, b.model, data, val, num_alphas, meta)


def barrier_height(curve: InterpolationCurve) -> BarrierHeights:
    """Halfway and max-over-path excess loss relative to the endpoint chord.

    Negative values are kept as they are.
    """
    al, loss = curve.alphas, curve.train_loss
    l0, l1 = loss[0], loss[-1]
    hits = np.flatnonzero(al == 0.5)
    if hits.size:
        mid = loss[hits[0]]
        interpolated = False
    else:
        j = int(np.searchsorted(al, 0.5))
        t = (0.5 - al[j - 1]) / (al[j] - al[j - 1])
        mid = loss[j - 1] + t * (loss[j] - loss[j - 1])
        interpolated = True
    halfway = float(mid - (l0 + l1) / 2.0)
    chord = l0 + al * (l1 - l0)
    return BarrierHeights(halfway, float(np.max(loss - chord)), interpolated)


def stability_verdict(curve: InterpolationCurve, tolerance: float = DEFAULT_TOLERANCE) -> StabilityReport:
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    bh = barrier_height(curve)
    return StabilityReport(
        barrier_halfway=bh.halfway,
        barrier_max=bh.max,
        stable=bh.max <= tolerance,
        tolerance=tolerance,
        sparsity=curve.endpoint_meta.get("sparsity"),
        halfway_interpolated=bh.halfway_interpolated,
    )


def barrier_ratio(syn_report: StabilityReport, imp_report: StabilityReport) -> BarrierRatio:
    """Signed ratio of synthetic to IMP halfway barriers at matched sparsity."""
    a, b = syn_report.sparsity, imp_report.sparsity
    if a is not None and b is not None and abs(a - b) > 1e-6:
        raise ValueError(f"reports come from different sparsities ({a} vs {b})")
    if abs(imp_report.barrier_halfway) < RATIO_EPS:
        return BarrierRatio(float("nan"), True)
    return BarrierRatio(syn_report.barrier_halfway / imp_report.barrier_halfway, False)
