"""Acceptance criteria, one test each, at their stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from sdlab.checkpoint import (
    BadMagicError,
    HashMismatchError,
    PayloadLengthError,
    TruncatedCheckpointError,
    decode,
    load_checkpoint,
    save_checkpoint,
)
from sdlab.config import PROFILES, from_dict
from sdlab.datasets import LabeledBatch, make_blobs, make_rings, split
from sdlab.distill import DistillConfig, distill, eval_synthetic, random_subset
from sdlab.harness import ArtifactIndex, run_pipeline
from sdlab.hessian import diag_stats, fd_diagonal, hessian_diag_estimate, hessian_diag_exact
from sdlab.landscape import grid_eval, plane_from_models, point_loss, project
from sdlab.nn import ArchSpec, TrainConfig, evaluate, init_model, loss_and_grad, loss_value, param_count, train
from sdlab.pruning import imp, rewind, sparsity
from sdlab.stability import InterpolationCurve, barrier_height, interpolation_curve

from helpers import MLP, fd_grad
from rings_study import ROUNDS, means, rings_study

BLOB_CFG = TrainConfig(30, 16, 0.05, 0.9, 0)


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-7)


@pytest.mark.criterion(1, "analytic gradients match central differences")
def test_criterion_1_gradient_oracle(record_property):
    start = time.perf_counter()
    archs = [
        MLP,
        ArchSpec("mlp", (4, 8, 3)),
        ArchSpec("mlp", (3, 10, 6, 5)),
        ArchSpec("convnet", (1, 3, 4, 3), kernel_size=3, input_hw=(6, 6)),
        ArchSpec("convnet", (2, 4, 2), kernel_size=3, input_hw=(5, 4)),
    ]
    worst = 0.0
    for pair in range(10):
        rng = np.random.default_rng(pair)
        arch = archs[pair % len(archs)]
        m = init_model(arch, pair)
        batch = LabeledBatch(rng.normal(size=(8, arch.input_dim)), rng.integers(0, arch.num_classes, 8))
        _, g = loss_and_grad(m, batch)
        idx = rng.choice(m.params.size, size=min(50, m.params.size), replace=False)
        num = fd_grad(lambda w: loss_value(arch, w, batch), m.params, idx, h=1e-4)
        worst = max(worst, float(rel_err(g[idx], num).max()))
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-3
    assert elapsed < 10


@pytest.mark.criterion(2, "IMP sparsity schedule, rewinding and monotone masks")
def test_criterion_2_imp_mechanics(blob_split, record_property):
    start = time.perf_counter()
    tr, va = blob_split
    init = init_model(MLP, 0)
    rate, rounds = 0.2, 5
    recs = imp(init, tr, rounds, rate, BLOB_CFG, val=va)
    n = param_count(MLP)
    prev = None
    worst = 0.0
    for r, rec in enumerate(recs, start=1):
        gap = abs(sparsity(rec.mask) - (1 - (1 - rate) ** r))
        worst = max(worst, gap)
        assert gap <= 1 / n
        rewound = rewind(init, rec.mask)
        keep = rec.mask.bits
        assert rewound.params[keep].tobytes() == init.params[keep].tobytes()
        assert (rewound.params[~keep] == 0).all()
        if prev is not None:
            assert not (rec.mask.bits & ~prev).any()
        prev = rec.mask.bits
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst sparsity gap {worst:.2e} (1/n = {1 / n:.2e}), {elapsed:.1f}s")
    assert elapsed < 120


@pytest.mark.criterion(3, "linear mode connectivity kernel")
def test_criterion_3_lmc_kernel(trained_blob_model, blob_split, record_property):
    tr, va = blob_split
    self_curve = interpolation_curve(trained_blob_model, trained_blob_model, tr, va, 21)
    bh = barrier_height(self_curve)
    assert bh.halfway == 0.0 and bh.max == 0.0
    a = trained_blob_model
    b = train(init_model(MLP, 5), tr, BLOB_CFG).model
    c = interpolation_curve(a, b, tr, va, 21)
    assert abs(c.train_loss[0] - evaluate(a, tr)[0]) <= 1e-9
    assert abs(c.train_loss[-1] - evaluate(b, tr)[0]) <= 1e-9
    three = lambda losses: barrier_height(InterpolationCurve([0, 0.5, 1], losses, [0, 0, 0])).halfway
    assert three([0.1, 0.5, 0.1]) == pytest.approx(0.4, abs=1e-15)
    assert three([0.2, 0.1, 0.2]) == pytest.approx(-0.1, abs=1e-15)
    record_property("detail", "self barrier 0, endpoints within 1e-9, hand cases 0.4 and -0.1")


@pytest.mark.criterion(4, "landscape plane, reference losses and evaluation count")
def test_criterion_4_landscape(blob_split, record_property):
    tr, _ = blob_split
    refs = [train(init_model(MLP, s), tr, BLOB_CFG).model for s in (1, 2, 3)]
    plane = plane_from_models(*refs)
    (x0, y0), (d, zero), (x2, y2) = plane.ref_coords
    assert (x0, y0, zero) == (0.0, 0.0, 0.0)
    for ref, (cx, cy) in zip(refs, plane.ref_coords):
        px, py, _ = project(ref, plane)
        assert abs(px - cx) <= 1e-8 and abs(py - cy) <= 1e-8
        assert abs(point_loss(plane, cx, cy, tr) - evaluate(ref, tr)[0]) <= 1e-9
    g = grid_eval(plane, resolution=(100, 100), data=tr)
    assert g.evaluations == 10_000
    for ref, rl in zip(refs, g.ref_losses):
        assert abs(rl - evaluate(ref, tr)[0]) <= 1e-9
    record_property("detail", f"d = {d:.4f}, (x2, y2) = ({x2:.4f}, {y2:.4f}), 10000 evaluations")


@pytest.mark.criterion(5, "stochastic Hessian diagonal vs finite-difference oracle")
def test_criterion_5_hessian(blob_split, trained_blob_model, record_property):
    start = time.perf_counter()
    a = np.array([1.0, 2.0, 3.0])
    quad = fd_diagonal(lambda w: 0.5 * np.sum(a * w * w), np.array([0.4, -0.7, 1.1]), 1e-4)
    assert np.abs(quad - a).max() <= 1e-4
    tr, _ = blob_split
    batch = tr.batch(np.arange(len(tr)))
    model = trained_blob_model
    assert model.params.size <= 1000
    exact = diag_stats(hessian_diag_exact(model, batch))
    est = diag_stats(hessian_diag_estimate(model, batch, 200, 0), method="stochastic", probes_used=200)
    errs = {k: abs(getattr(est, k) - getattr(exact, k)) / abs(getattr(exact, k)) for k in ("mean", "std", "avg_magnitude")}
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{k} {v:.1%}" for k, v in errs.items()) + f"; {elapsed:.1f}s")
    assert max(errs.values()) <= 0.10
    assert elapsed < 60


def _utility(real_set, arch, cfg):
    tr, va = split(real_set, 0.2, 0)
    syn = distill(tr, arch, 10, DistillConfig())
    seeds = [1, 2, 3, 4, 5]
    real = np.mean([evaluate(train(init_model(arch, s), tr, replace(cfg, ordering_seed=s)).model, va)[1] for s in seeds])
    synthetic = eval_synthetic(syn, arch, va, cfg, seeds).mean
    subset = np.mean([eval_synthetic(random_subset(tr, 10, s), arch, va, cfg, [s]).mean for s in seeds])
    return real, synthetic, subset


@pytest.mark.criterion(6, "distilled data keeps 0.9x real accuracy and beats a random subset")
def test_criterion_6_distillation_utility(record_property):
    start = time.perf_counter()
    cases = {
        "blobs": (make_blobs(3, 100, 2, 0.5, 7), MLP, BLOB_CFG),
        "rings": (make_rings(2, 200, 0.05, 3), ArchSpec("mlp", (2, 32, 32, 2)), TrainConfig(50, 16, 0.05, 0.9, 0)),
    }
    results = {name: _utility(*case) for name, case in cases.items()}
    elapsed = time.perf_counter() - start
    record_property("detail", "; ".join(
        f"{k} real {r:.3f} synthetic {s:.3f} subset {b:.3f}" for k, (r, s, b) in results.items()) + f"; {elapsed:.0f}s")
    for real, synthetic, subset in results.values():
        assert synthetic >= 0.9 * real
        assert synthetic > subset
    assert elapsed < 600


@pytest.mark.criterion(7, "synthetic subnetworks have no higher halfway barrier than IMP on rings")
def test_criterion_7_barrier_ordering(record_property):
    start = time.perf_counter()
    cfg, out = rings_study()
    assert len(cfg.seed_pairs) >= 5
    parts, ok = [], True
    for r in ROUNDS:
        imp_b, syn_b = means(out, "imp", r, "halfway"), means(out, "synthetic", r, "halfway")
        ratio = syn_b / imp_b if imp_b else float("nan")
        parts.append(f"{out['sparsity'][r]:.1%}: synthetic {syn_b:.4f} vs IMP {imp_b:.4f}, ratio {ratio:.2f}")
        ok &= syn_b <= imp_b
    elapsed = time.perf_counter() - start
    record_property("detail", "; ".join(parts) + f"; {elapsed:.0f}s")
    assert ok, "; ".join(parts)
    assert elapsed < 1800


@pytest.mark.criterion(8, "distilled mask costs fewer training points by exactly the ipc ratio")
def test_criterion_8_data_cost(tmp_path, record_property):
    raw = {**PROFILES["quick"], "output_dir": str(tmp_path)}
    raw["distill"] = {**raw["distill"], "outer_steps": 20}
    cfg = from_dict(raw)
    index = run_pipeline(cfg, until="prune")
    summary = json.loads((index.root / "prune/summary.json").read_text())
    k = cfg.dataset["classes"]
    n_train = summary["train_rows"]
    assert summary["synthetic_rows"] == cfg.ipc * k
    by = {(row["family"], row["round"]): row["points_to_find_mask"] for row in summary["rows"]}
    for r in range(1, cfg.prune.rounds + 1):
        imp_pts, syn_pts = by[("imp", r)], by[("distilled", r)]
        assert syn_pts < imp_pts
        assert imp_pts * (cfg.ipc * k) == syn_pts * n_train
    record_property("detail", f"IMP {by[('imp', 1)]} vs distilled {by[('distilled', 1)]} per round, ratio {n_train}/{cfg.ipc * k}")


@pytest.mark.criterion(9, "deterministic reruns, exact checkpoints, typed corruption errors")
def test_criterion_9_determinism_and_persistence(tmp_path, record_property):
    runs = []
    for name in ("a", "b"):
        runs.append(run_pipeline(from_dict({**PROFILES["quick"], "output_dir": str(tmp_path / name)})))
    assert runs[0].hashes() == runs[1].hashes()
    assert runs[0].path.read_bytes() == runs[1].path.read_bytes()
    index = ArtifactIndex.load(tmp_path / "a")
    checked = 0
    for e in index.entries:
        if e.path.endswith(".sdlab"):
            obj = load_checkpoint(index.resolve(e))
            again = tmp_path / "again.sdlab"
            save_checkpoint(obj, again, _extra(index.resolve(e)))
            assert again.read_bytes() == index.resolve(e).read_bytes()
            checked += 1
    raw = index.resolve(index.of_kind("model")[0]).read_bytes()
    flipped = bytearray(raw)
    flipped[-3] ^= 0x10
    for bad, err in ((b"XXXXXXXX" + raw[8:], BadMagicError), (raw[:20], TruncatedCheckpointError),
                     (raw[:-8], PayloadLengthError), (bytes(flipped), HashMismatchError)):
        with pytest.raises(err):
            decode(bad)
    record_property("detail", f"{len(index.entries)} artifacts identical across reruns, {checked} checkpoints re-encoded bitwise")


def _extra(path):
    # metadata the harness attached beyond what the object itself carries
    from sdlab.checkpoint import read_record, to_record

    rec = read_record(path)
    base = to_record(load_checkpoint(path)).meta
    return {k: v for k, v in rec.meta.items() if k not in base}
