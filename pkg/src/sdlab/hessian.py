"""Diagonal of the loss Hessian on a batch, plus summary statistics.

Two estimators:

* ``exact_fd``: second central difference per coordinate, 2n+1 loss
  evaluations. Used as the oracle on small models.
* ``stochastic``: Hutchinson's estimator ``mean_k z_k * (H z_k)`` with
  Rademacher probes, where ``H z`` is a central difference of gradients with
  step ``eps = 1e-3 * (1 + max|w|)``.

ReLU losses are only piecewise smooth, and a difference quotient whose step
crosses a kink picks up the gradient jump divided by the step. Both
estimators therefore freeze the ReLU on/off pattern of the point being
analysed (a unit sitting exactly at zero counts as off) and difference the
loss of that smooth piece. Away from kinks this is the ordinary Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import ModelState, _batch_arrays, _check_batch, _loss_grad_arrays, loss_value, relu_gates

EXACT_PARAM_LIMIT = 10_000


class HessianTooLargeError(ValueError):
    pass


class NonFiniteCurvatureError(FloatingPointError):
    def __init__(self, probe: int):
        self.probe = probe
        super().__init__(f"Hessian-vector product is non-finite for probe {probe}")


@dataclass
class HessianDiagStats:
    min: float
    max: float
    mean: float
    std: float
    avg_magnitude: float
    count: int
    probes_used: int = 0
    method: str = "exact_fd"

    def as_row(self) -> dict:
        return {
            "min": self.min,
            "max": self.max,
            "mean": self.mean,
            "std": self.std,
            "avg_magnitude": self.avg_magnitude,
            "count": self.count,
            "probes_used": self.probes_used,
            "method": self.method,
        }


def fd_diagonal(loss: Callable[[np.ndarray], float], w: np.ndarray, h: float) -> np.ndarray:
    """``(L(w + h e_i) - 2 L(w) + L(w - h e_i)) / h**2`` for every coordinate."""
    if not h > 0:
        raise ValueError("h must be positive")
    w = np.array(w, dtype=np.float64)
    center = loss(w)
    out = np.empty_like(w)
    for i in range(w.size):
        orig = w[i]
        w[i] = orig + h
        up = loss(w)
        w[i] = orig - h
        down = loss(w)
        w[i] = orig
        out[i] = (up - 2.0 * center + down) / (h * h)
    return out


def rademacher(n: int, seed: int, probe: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=(int(probe) << 64) | int(seed)))
    return rng.integers(0, 2, n).astype(np.float64) * 2.0 - 1.0


def hutchinson_diagonal(
    grad: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray,
    probes: int,
    seed: int,
    support: np.ndarray | None = None,
) -> np.ndarray:
    """Average of ``z * Hz`` over Rademacher probes; ``Hz`` by differencing ``grad``.

    With ``support`` the probes are zero outside it, which estimates the
    diagonal of the Hessian restricted to those coordinates.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    eps = 1e-3 * (1.0 + np.abs(w).max())
    acc = np.zeros_like(w)
    for k in range(probes):
        z = rademacher(w.size, seed, k)
        if support is not None:
            z = np.where(support, z, 0.0)
        hz = (grad(w + eps * z) - grad(w - eps * z)) / (2.0 * eps)
        if not np.isfinite(hz).all():
            raise NonFiniteCurvatureError(k)
        acc += z * hz
    return acc / probes


def hessian_diag_exact(model: ModelState, batch, h: float = 1e-4) -> np.ndarray:
    n = model.params.size
    if n > EXACT_PARAM_LIMIT:
        raise HessianTooLargeError(
            f"{n} parameters exceeds the exact-diagonal limit of {EXACT_PARAM_LIMIT}; use hessian_diag_estimate"
        )
    x, y = _batch_arrays(batch)
    _check_batch(model.arch, x, y)
    gates = relu_gates(model.arch, model.params, x)
    return fd_diagonal(lambda w: loss_value(model.arch, w, batch, gates), model.params, h)


def hessian_diag_estimate(model: ModelState, batch, probes: int, seed: int, mask=None) -> np.ndarray:
    x, y = _batch_arrays(batch)
    _check_batch(model.arch, x, y)
    support = None if mask is None else np.asarray(getattr(mask, "bits", mask), dtype=bool)
    gates = relu_gates(model.arch, model.params, x)

    def grad(w):
        return _loss_grad_arrays(model.arch, w, x, y, gates=gates)[1]

    return hutchinson_diagonal(grad, model.params, probes, seed, support)


def diag_stats(diag: np.ndarray, mask=None, method: str = "exact_fd", probes_used: int = 0) -> HessianDiagStats:
    """Statistics over surviving coordinates only (population std)."""
    diag = np.asarray(diag, dtype=np.float64)
    if mask is None:
        keep = np.ones(diag.size, dtype=bool)
    else:
        keep = np.asarray(getattr(mask, "bits", mask), dtype=bool)
        if keep.shape != diag.shape:
            raise ValueError("mask and diagonal are not aligned")
    vals = diag[keep]
    if vals.size == 0:
        raise ValueError("no surviving coordinates to summarise")
    return HessianDiagStats(
        min=float(vals.min()),
        max=float(vals.max()),
        mean=float(vals.mean()),
        std=float(vals.std()),
        avg_magnitude=float(np.abs(vals).mean()),
        count=int(vals.size),
        probes_used=int(probes_used),
        method=method,
    )
