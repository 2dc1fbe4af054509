"""CSV and SVG reports built from the artifacts listed in an index.

CSV schemas (one header row, comma separated):

* ``lmc_<family>.csv``: round, alpha, train_loss, val_accuracy (mean over seed pairs)
* ``landscape_<family>_round<r>.csv``: x, y, loss
* ``sparsity_accuracy.csv``: family, round, sparsity, val_loss, val_accuracy,
  points_per_round, points_to_find_mask
* ``barrier_scatter.csv``: round, sparsity, barrier_imp, barrier_synthetic,
  barrier_ratio, degenerate, accuracy_imp, accuracy_synthetic, accuracy_ratio, compression
* ``hessian_table.csv``: subnetwork, sparsity, min_max, mean_std, avg_magnitude
* ``hessian_raw.csv``: subnetwork, round, sparsity, min, max, mean, std, avg_magnitude, count, probes_used

SVG is written as plain text with fixed number formatting so that output
is byte-stable.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict

import numpy as np

from .checkpoint import load_checkpoint
from .harness import FAMILY_LABELS, ArtifactIndex, writer_for
from .stability import RATIO_EPS

REPORT_KINDS = ("lmc_curves", "landscape_heatmap", "sparsity_accuracy", "barrier_scatter", "hessian_table")
REQUIRED = {
    "lmc_curves": ("curve",),
    "landscape_heatmap": ("grid",),
    "sparsity_accuracy": ("prune_summary",),
    "barrier_scatter": ("stability_summary", "prune_summary"),
    "hessian_table": ("hessian_stats",),
}

LMC_COLUMNS = ("round", "alpha", "train_loss", "val_accuracy")
LANDSCAPE_COLUMNS = ("x", "y", "loss")
SPARSITY_COLUMNS = ("family", "round", "sparsity", "val_loss", "val_accuracy", "points_per_round", "points_to_find_mask")
SCATTER_COLUMNS = (
    "round", "sparsity", "barrier_imp", "barrier_synthetic", "barrier_ratio", "degenerate",
    "accuracy_imp", "accuracy_synthetic", "accuracy_ratio", "compression",
)
HESSIAN_COLUMNS = ("subnetwork", "sparsity", "min_max", "mean_std", "avg_magnitude")
HESSIAN_RAW_COLUMNS = ("subnetwork", "round", "sparsity", "min", "max", "mean", "std", "avg_magnitude", "count", "probes_used")


class MissingArtifactError(LookupError):
    def __init__(self, kind: str, missing):
        self.missing = tuple(missing)
        super().__init__(f"report {kind!r} needs artifacts of type {', '.join(self.missing)}; none in index")


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return v


def _f(v: float) -> str:
    return f"{v:.2f}"


# -- svg helpers ---------------------------------------------------------------

W, H, PAD = 480, 320, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _scale(lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _svg(body: list[str], title: str) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<title>{title}</title>",
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _axes(xlabel: str, ylabel: str, xr, yr) -> list[str]:
    x0, x1, y0, y1 = PAD, W - PAD / 2, H - PAD, PAD / 2
    return [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">{ylabel}</text>',
        f'<text x="{x0}" y="{y0 + 14}" font-size="10">{xr[0]:.3g}</text>',
        f'<text x="{x1}" y="{y0 + 14}" font-size="10" text-anchor="end">{xr[1]:.3g}</text>',
        f'<text x="{x0 - 4}" y="{y0}" font-size="10" text-anchor="end">{yr[0]:.3g}</text>',
        f'<text x="{x0 - 4}" y="{y1 + 8}" font-size="10" text-anchor="end">{yr[1]:.3g}</text>',
    ]


def _heat(t: float) -> str:
    # dark blue (low) to yellow (high)
    t = min(max(t, 0.0), 1.0)
    r, g, b = int(30 + 225 * t), int(30 + 200 * t), int(120 - 100 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


# -- report builders -----------------------------------------------------------


def _lmc(index: ArtifactIndex, out) -> list:
    by_family = defaultdict(lambda: defaultdict(list))
    for e in index.of_kind("curve"):
        by_family[e.meta["family"]][e.meta["round"]].append(load_checkpoint(index.resolve(e)))
    files = []
    for fam in sorted(by_family):
        rounds = by_family[fam]
        rows, series = [], []
        for r in sorted(rounds):
            curves = rounds[r]
            alphas = curves[0].alphas
            loss = np.mean([c.train_loss for c in curves], axis=0)
            acc = np.mean([c.val_accuracy for c in curves], axis=0)
            rows += [(r, float(a), float(lv), float(av)) for a, lv, av in zip(alphas, loss, acc)]
            series.append((r, alphas, loss))
        files.append(out.text(f"reports/lmc_{fam}.csv", _csv(LMC_COLUMNS, rows), "report_csv", {"report": "lmc_curves"}))
        lo = min(float(s[2].min()) for s in series)
        hi = max(float(s[2].max()) for s in series)
        sx, sy = _scale(0.0, 1.0, PAD, W - PAD / 2), _scale(lo, hi, H - PAD, PAD / 2)
        body = _axes("interpolation alpha", "train loss", (0.0, 1.0), (lo, hi))
        for k, (r, al, loss) in enumerate(series):
            pts = " ".join(f"{_f(sx(a))},{_f(sy(v))}" for a, v in zip(al, loss))
            color = PALETTE[k % len(PALETTE)]
            body.append(f'<polyline class="curve" data-round="{r}" points="{pts}" fill="none" stroke="{color}"/>')
            body.append(f'<text x="{W - PAD}" y="{PAD / 2 + 14 * (k + 1)}" font-size="10" fill="{color}">round {r}</text>')
        svg = _svg(body, f"Linear interpolation, {FAMILY_LABELS.get(fam, fam)}")
        files.append(out.text(f"reports/lmc_{fam}.svg", svg, "report_svg", {"report": "lmc_curves"}))
    return files


def _landscape(index: ArtifactIndex, out) -> list:
    files = []
    for e in index.of_kind("grid"):
        grid = load_checkpoint(index.resolve(e))
        stem = f"reports/landscape_{e.meta['family']}_round{e.meta['round']}"
        xs, ys = grid.xs, grid.ys
        rows = [(float(xs[i]), float(ys[j]), float(grid.losses[i, j])) for i in range(len(xs)) for j in range(len(ys))]
        files.append(out.text(f"{stem}.csv", _csv(LANDSCAPE_COLUMNS, rows), "report_csv", {"report": "landscape_heatmap"}))
        vals = np.log(grid.losses[np.isfinite(grid.losses)])
        lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
        sx = _scale(grid.x_range[0], grid.x_range[1], PAD, W - PAD / 2)
        sy = _scale(grid.y_range[0], grid.y_range[1], H - PAD, PAD / 2)
        nx, ny = grid.resolution
        cw = (W - 1.5 * PAD) / nx
        ch = (H - 1.5 * PAD) / ny
        body = _axes("x", "y", grid.x_range, grid.y_range)
        for i in range(nx):
            for j in range(ny):
                v = grid.losses[i, j]
                fill = "#ff00ff" if not np.isfinite(v) else _heat((math.log(v) - lo) / ((hi - lo) or 1.0))
                cx = PAD + i * (W - 1.5 * PAD - cw) / max(nx - 1, 1)
                cy = H - PAD - ch - j * (H - 1.5 * PAD - ch) / max(ny - 1, 1)
                body.append(f'<rect x="{_f(cx)}" y="{_f(cy)}" width="{_f(cw)}" height="{_f(ch)}" fill="{fill}"/>')
        for k, (x, y) in enumerate(grid.ref_coords):
            body.append(
                f'<circle class="ref-marker" data-ref="{k}" cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="5" '
                f'fill="none" stroke="white" stroke-width="2"/>'
            )
        title = f"Loss landscape, {FAMILY_LABELS.get(e.meta['family'], e.meta['family'])} round {e.meta['round']}"
        files.append(out.text(f"{stem}.svg", _svg(body, title), "report_svg", {"report": "landscape_heatmap"}))
    return files


def _read_json(index: ArtifactIndex, kind: str) -> dict:
    return json.loads(index.resolve(index.of_kind(kind)[0]).read_text())


def _sparsity_accuracy(index: ArtifactIndex, out) -> list:
    summary = _read_json(index, "prune_summary")
    rows = [tuple(r[c] for c in SPARSITY_COLUMNS) for r in summary["rows"]]
    return [out.text("reports/sparsity_accuracy.csv", _csv(SPARSITY_COLUMNS, rows), "report_csv",
                     {"report": "sparsity_accuracy"})]


def scatter_rows(stability: dict, prune: dict) -> list[dict]:
    """Per pruning round: mean halfway barrier and mean real-data accuracy for
    each family, and the synthetic/IMP ratios of both."""
    barriers = defaultdict(list)
    for row in stability["rows"]:
        barriers[(row["family"], row["round"])].append(row["barrier_halfway"])
    acc = {(r["family"], r["round"]): r for r in prune["rows"]}
    compression = prune["train_rows"] / prune["synthetic_rows"]
    out = []
    rounds = sorted({r for f, r in barriers if f == "imp"})
    for r in rounds:
        if ("distilled", r) not in barriers:
            continue
        b_imp = float(np.mean(barriers[("imp", r)]))
        b_syn = float(np.mean(barriers[("distilled", r)]))
        degenerate = abs(b_imp) < RATIO_EPS
        a_imp = acc[("imp", r)]["val_accuracy"]
        a_syn = acc[("distilled", r)]["val_accuracy"]
        out.append({
            "round": r,
            "sparsity": acc[("imp", r)]["sparsity"],
            "barrier_imp": b_imp,
            "barrier_synthetic": b_syn,
            "barrier_ratio": float("nan") if degenerate else b_syn / b_imp,
            "degenerate": degenerate,
            "accuracy_imp": a_imp,
            "accuracy_synthetic": a_syn,
            "accuracy_ratio": a_syn / a_imp if a_imp > 0 else float("nan"),
            "compression": compression,
        })
    return out


def _barrier_scatter(index: ArtifactIndex, out) -> list:
    rows = scatter_rows(_read_json(index, "stability_summary"), _read_json(index, "prune_summary"))
    files = [out.text("reports/barrier_scatter.csv", _csv(SCATTER_COLUMNS, [tuple(r[c] for c in SCATTER_COLUMNS) for r in rows]),
                      "report_csv", {"report": "barrier_scatter"})]
    pts = [r for r in rows if math.isfinite(r["barrier_ratio"]) and math.isfinite(r["accuracy_ratio"])]
    xr = (min([0.0] + [r["barrier_ratio"] for r in pts]), max([1.0] + [r["barrier_ratio"] for r in pts]))
    yr = (min([0.9] + [r["accuracy_ratio"] for r in pts]), max([1.1] + [r["accuracy_ratio"] for r in pts]))
    sx, sy = _scale(*xr, PAD, W - PAD / 2), _scale(*yr, H - PAD, PAD / 2)
    body = _axes("barrier ratio (synthetic / IMP)", "accuracy ratio (synthetic / IMP)", xr, yr)
    body.append(f'<line x1="{_f(sx(1.0))}" y1="{H - PAD}" x2="{_f(sx(1.0))}" y2="{PAD / 2}" stroke="#999" stroke-dasharray="4"/>')
    for k, r in enumerate(pts):
        radius = 3.0 + 2.0 * math.log2(max(r["compression"], 1.0))
        body.append(
            f'<circle class="point" data-round="{r["round"]}" cx="{_f(sx(r["barrier_ratio"]))}" '
            f'cy="{_f(sy(r["accuracy_ratio"]))}" r="{_f(radius)}" fill="{PALETTE[k % len(PALETTE)]}" fill-opacity="0.6"/>'
        )
    files.append(out.text("reports/barrier_scatter.svg", _svg(body, "Barrier ratio vs accuracy ratio"), "report_svg",
                          {"report": "barrier_scatter"}))
    return files


def _hessian(index: ArtifactIndex, out) -> list:
    stats = _read_json(index, "hessian_stats")["rows"]
    table, raw = [], []
    for s in stats:
        label = FAMILY_LABELS.get(s["family"], s["family"])
        table.append((
            label,
            f"{100 * s['sparsity']:.1f}%",
            f"{s['min']:.4g} / {s['max']:.4g}",
            f"{s['mean']:.4g} ± {s['std']:.4g}",
            f"{s['avg_magnitude']:.4g}",
        ))
        raw.append((label, s["round"], s["sparsity"], s["min"], s["max"], s["mean"], s["std"], s["avg_magnitude"],
                    s["count"], s["probes_used"]))
    return [
        out.text("reports/hessian_table.csv", _csv(HESSIAN_COLUMNS, table), "report_csv", {"report": "hessian_table"}),
        out.text("reports/hessian_raw.csv", _csv(HESSIAN_RAW_COLUMNS, raw), "report_csv", {"report": "hessian_table"}),
    ]


_BUILDERS = {
    "lmc_curves": _lmc,
    "landscape_heatmap": _landscape,
    "sparsity_accuracy": _sparsity_accuracy,
    "barrier_scatter": _barrier_scatter,
    "hessian_table": _hessian,
}


def emit_report(index: ArtifactIndex, kind: str, writer=None) -> list:
    """Write the ``kind`` report under ``<root>/reports`` and return the file paths.

    Without ``writer`` the new files are added to the index and the index
    file is rewritten.
    """
    if kind not in _BUILDERS:
        raise ValueError(f"unknown report kind {kind!r}; choose from {REPORT_KINDS}")
    missing = [t for t in REQUIRED[kind] if not index.of_kind(t)]
    if missing:
        raise MissingArtifactError(kind, missing)
    out = writer or writer_for(index)
    files = _BUILDERS[kind](index, out)
    if writer is None:
        index.write()
    return files
