"""Two-dimensional loss landscapes on the plane through three trained models.

The plane is anchored at the first model. ``u`` points at the second model;
``v`` is the Gram-Schmidt residual of the third model against ``u``. Points
are plain linear combinations ``origin + x*u + y*v`` (no filter
normalization), so in-plane distances are exact but off-plane distance to
other models is lost; :func:`project` reports it as a residual norm.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .nn import ModelState, evaluate

log = logging.getLogger(__name__)

COLINEAR_TOL = 1e-10
DEFAULT_RESOLUTION = (100, 100)
DEFAULT_PAD = 0.25


class ColinearModelsError(ValueError):
    pass


@dataclass(eq=False)
class Plane:
    origin: ModelState
    u: np.ndarray
    v: np.ndarray
    scale_u: float
    ref_coords: tuple[tuple[float, float], ...]


@dataclass(eq=False)
class LandscapeGrid:
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    resolution: tuple[int, int]
    losses: np.ndarray  # nx by ny, losses[i, j] at (xs[i], ys[j]); NaN where flagged
    flagged: np.ndarray
    ref_coords: tuple[tuple[float, float], ...]
    ref_losses: tuple[float, ...]
    evaluations: int
    plane: Plane | None = None

    @property
    def xs(self) -> np.ndarray:
        return axis_points(self.x_range, self.resolution[0])

    @property
    def ys(self) -> np.ndarray:
        return axis_points(self.y_range, self.resolution[1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "loss"])
            xs, ys = self.xs, self.ys
            for i in range(len(xs)):
                for j in range(len(ys)):
                    w.writerow([repr(float(xs[i])), repr(float(ys[j])), repr(float(self.losses[i, j]))])


def axis_points(rng: tuple[float, float], n: int) -> np.ndarray:
    # lo + (hi - lo) * (i / (n - 1)); i/(n-1) is correctly rounded, so a grid
    # of 2n-1 points reproduces every coordinate of the n-point grid exactly
    lo, hi = rng
    return np.array([lo + (hi - lo) * (i / (n - 1)) for i in range(n)])


def plane_from_models(m0: ModelState, m1: ModelState, m2: ModelState) -> Plane:
    if not (m0.arch == m1.arch == m2.arch):
        raise ValueError("reference models must share an architecture")
    d1 = m1.params - m0.params
    scale = float(np.linalg.norm(d1))
    if scale == 0.0:
        raise ColinearModelsError("m0 and m1 coincide")
    u = d1 / scale
    d2 = m2.params - m0.params
    x2 = float(d2 @ u)
    resid = d2 - x2 * u
    y2 = float(np.linalg.norm(resid))
    if y2 < COLINEAR_TOL:
        raise ColinearModelsError(f"third model lies on the line through the first two (residual {y2:.3g})")
    v = resid / y2
    # one re-orthogonalization pass against rounding
    v = v - (v @ u) * u
    v /= np.linalg.norm(v)
    return Plane(m0, u, v, scale, ((0.0, 0.0), (scale, 0.0), (x2, y2)))


def materialize(plane: Plane, x: float, y: float, mask=None) -> ModelState:
    if x == 0.0 and y == 0.0:
        params = plane.origin.params.copy()
    else:
        params = plane.origin.params + x * plane.u + y * plane.v
    if mask is not None:
        params = np.where(getattr(mask, "bits", mask), params, 0.0)
    return plane.origin.with_params(params)


def project(model: ModelState, plane: Plane) -> tuple[float, float, float]:
    """Plane coordinates of ``model`` and the norm of its off-plane component."""
    if model.arch != plane.origin.arch:
        raise ValueError("model and plane use different architectures")
    d = model.params - plane.origin.params
    x, y = float(d @ plane.u), float(d @ plane.v)
    residual = float(np.linalg.norm(d - x * plane.u - y * plane.v))
    return x, y, residual


def default_ranges(plane: Plane, pad: float = DEFAULT_PAD):
    xs = [c[0] for c in plane.ref_coords]
    ys = [c[1] for c in plane.ref_coords]
    wx, wy = max(xs) - min(xs), max(ys) - min(ys)
    return (min(xs) - pad * wx, max(xs) + pad * wx), (min(ys) - pad * wy, max(ys) + pad * wy)


def point_loss(plane: Plane, x: float, y: float, data, mask=None) -> float:
    return evaluate(materialize(plane, x, y, mask), data)[0]


def grid_eval(plane: Plane, x_range=None, y_range=None, resolution=DEFAULT_RESOLUTION, data=None, mask=None) -> LandscapeGrid:
    """Training loss at every node of an ``nx`` by ``ny`` grid over the plane.

    Cells are visited row-major (x outer). Non-finite losses are recorded as
    flagged NaN cells rather than raised.
    """
    if data is None:
        raise ValueError("grid_eval needs data to measure loss on")
    nx, ny = (int(r) for r in resolution)
    if nx < 2 or ny < 2:
        raise ValueError("resolution must be at least 2x2")
    dx, dy = default_ranges(plane)
    x_range = tuple(x_range) if x_range is not None else dx
    y_range = tuple(y_range) if y_range is not None else dy
    for x, y in plane.ref_coords:
        if not (x_range[0] <= x <= x_range[1] and y_range[0] <= y <= y_range[1]):
            warnings.warn(f"reference point ({x:.4g}, {y:.4g}) lies outside the grid ranges", stacklevel=2)
    xs, ys = axis_points(x_range, nx), axis_points(y_range, ny)
    losses = np.empty((nx, ny))
    flagged = np.zeros((nx, ny), dtype=bool)
    count = 0
    for i in range(nx):
        for j in range(ny):
            count += 1
            try:
                value = point_loss(plane, xs[i], ys[j], data, mask)
            except (FloatingPointError, ValueError):
                value = float("nan")
            if not np.isfinite(value):
                flagged[i, j] = True
                value = float("nan")
            losses[i, j] = value
    ref_losses = tuple(point_loss(plane, x, y, data, mask) for x, y in plane.ref_coords)
    log.info("landscape grid %dx%d evaluated (%d flagged)", nx, ny, int(flagged.sum()))
    return LandscapeGrid(x_range, y_range, (nx, ny), losses, flagged, plane.ref_coords, ref_losses, count, plane)
