import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdlab.nn import ArchSpec, ModelState, evaluate, init_model
from sdlab.landscape import (
    ColinearModelsError,
    axis_points,
    grid_eval,
    materialize,
    plane_from_models,
    project,
)

from helpers import MLP



def test_hand_gram_schmidt():
    arch = ArchSpec("mlp", (2, 1))  # W[1,2] + b[1] = 3 params
    m0 = ModelState(arch, [0.0, 0.0, 0.0])
    m1 = ModelState(arch, [2.0, 0.0, 0.0])
    m2 = ModelState(arch, [1.0, 3.0, 0.0])
    p = plane_from_models(m0, m1, m2)
    assert np.array_equal(p.u, [1.0, 0.0, 0.0]) and np.array_equal(p.v, [0.0, 1.0, 0.0])
    assert p.ref_coords == ((0.0, 0.0), (2.0, 0.0), (1.0, 3.0))
    assert p.scale_u == 2.0


def _models(seeds=(1, 2, 3)):
    return [init_model(MLP, s) for s in seeds]


def test_orthonormal_random_models():
    p = plane_from_models(*_models())
    assert abs(p.u @ p.v) <= 1e-10
    assert abs(np.linalg.norm(p.u) - 1) <= 1e-10 and abs(np.linalg.norm(p.v) - 1) <= 1e-10


def test_colinear_rejected():
    m0, m1, _ = _models()
    mid = m0.with_params((m0.params + m1.params) / 2)
    with pytest.raises(ColinearModelsError):
        plane_from_models(m0, m1, mid)
    with pytest.raises(ColinearModelsError):
        plane_from_models(m0, m0, m1)


def test_projection_examples():
    m0, m1, m2 = _models()
    p = plane_from_models(m0, m1, m2)
    x, y, r = project(m1, p)
    assert x == pytest.approx(p.scale_u, abs=1e-8) and abs(y) < 1e-8 and r < 1e-8
    assert project(m0, p) == (0.0, 0.0, 0.0)
    x2, y2, r2 = project(m2, p)
    assert (x2, y2) == pytest.approx(p.ref_coords[2], abs=1e-8) and r2 < 1e-8
    assert project(init_model(MLP, 9), p)[2] > 0
    with pytest.raises(ValueError):
        project(init_model(ArchSpec("mlp", (2, 3)), 0), p)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_reconstruction(x, y, seed):
    p = plane_from_models(*_models((seed, seed + 1, seed + 2)))
    px, py, _ = project(materialize(p, x, y), p)
    assert abs(px - x) <= 1e-8 and abs(py - y) <= 1e-8


def test_grid_counts_and_reference_agreement(blobs):
    refs = _models()
    p = plane_from_models(*refs)
    g = grid_eval(p, resolution=(100, 100), data=blobs)
    assert g.evaluations == 10_000 and g.losses.shape == (100, 100)
    for m, rl in zip(refs, g.ref_losses):
        assert abs(rl - evaluate(m, blobs)[0]) <= 1e-9


def test_grid_origin_cell_is_m0(blobs):
    refs = _models()
    p = plane_from_models(*refs)
    g = grid_eval(p, (0.0, 20.0), (0.0, 20.0), (3, 3), blobs)
    assert g.losses[0, 0] == evaluate(refs[0], blobs)[0]


def test_refined_grid_shares_values(blobs):
    p = plane_from_models(*_models())
    coarse = grid_eval(p, resolution=(5, 4), data=blobs)
    fine = grid_eval(p, resolution=(9, 7), data=blobs)
    assert np.array_equal(fine.xs[::2], coarse.xs) and np.array_equal(fine.ys[::2], coarse.ys)
    assert np.array_equal(fine.losses[::2, ::2], coarse.losses)


def test_grid_warns_when_refs_outside(blobs):
    p = plane_from_models(*_models())
    with pytest.warns(UserWarning):
        grid_eval(p, (100.0, 101.0), (100.0, 101.0), (2, 2), blobs)


def test_grid_flags_nonfinite(blobs):
    p = plane_from_models(*_models())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = grid_eval(p, (0.0, 1e308), (0.0, 1e308), (2, 2), blobs)
    assert g.flagged[-1, -1] and np.isnan(g.losses[-1, -1])
    assert not g.flagged[0, 0]


def test_grid_resolution_minimum(blobs):
    p = plane_from_models(*_models())
    with pytest.raises(ValueError):
        grid_eval(p, resolution=(1, 5), data=blobs)


def test_masked_grid_zeroes_pruned(blobs):
    from sdlab.pruning import SparsityMask, magnitude_prune

    refs = _models()
    mask = magnitude_prune(refs[0], SparsityMask.dense(MLP), 0.3, "per_layer")
    p = plane_from_models(*[m.with_params(np.where(mask.bits, m.params, 0.0)) for m in refs])
    pt = materialize(p, 0.3, 0.7, mask)
    assert (pt.params[~mask.bits] == 0).all()
    g = grid_eval(p, resolution=(3, 3), data=blobs, mask=mask)
    assert np.isfinite(g.losses).all()


def test_axis_points_endpoints():
    xs = axis_points((-1.5, 2.5), 5)
    assert xs[0] == -1.5 and xs[-1] == 2.5 and len(xs) == 5


def test_grid_csv_schema(tmp_path, blobs):
    p = plane_from_models(*_models())
    g = grid_eval(p, resolution=(2, 3), data=blobs)
    path = tmp_path / "g.csv"
    g.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["x", "y", "loss"]
    assert len(rows) == 1 + 6
    assert float(rows[1][0]) == g.xs[0] and float(rows[2][1]) == g.ys[1]
