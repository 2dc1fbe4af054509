"""End-to-end experiment pipeline and its artifact index.

``run_pipeline`` executes the stages in order::

    data -> distill -> prune -> stability -> landscape -> hessian -> reports

Every file goes through one ``_Writer`` which hashes it and records it in
the :class:`ArtifactIndex`. The index (``index.json``) is written last, or
with ``status: "FAILED"`` and the stage name when a stage raises.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .datasets import Dataset, load_idx, make_blobs, make_rings, split
from .distill import distill, eval_synthetic, random_subset
from .hessian import diag_stats, hessian_diag_estimate
from .landscape import grid_eval, plane_from_models, project
from .nn import ModelState, evaluate, init_model, train
from .pruning import distilled_prune, imp, rewind, sparsity
from .stability import barrier_height, interpolation_curve

log = logging.getLogger(__name__)

INDEX_NAME = "index.json"
STAGES = ("data", "distill", "prune", "stability", "landscape", "hessian", "reports")
STAGE_DEPS = {
    "data": (),
    "distill": ("data",),
    "prune": ("distill",),
    "stability": ("prune",),
    "landscape": ("prune",),
    "hessian": ("prune",),
    "reports": ("stability", "landscape", "hessian"),
}
FAMILIES = ("imp", "distilled")
FAMILY_LABELS = {"dense": "Dense", "imp": "IMP", "distilled": "Synthetic"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


@dataclass
class ArtifactEntry:
    path: str  # relative to the index root
    kind: str
    sha256: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"path": self.path, "kind": self.kind, "sha256": self.sha256, "meta": self.meta}


@dataclass
class ArtifactIndex:
    root: Path
    config_hash: str = ""
    status: str = "running"
    failed_stage: str | None = None
    error: str | None = None
    entries: list[ArtifactEntry] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return Path(self.root) / INDEX_NAME

    def of_kind(self, kind: str) -> list[ArtifactEntry]:
        return [e for e in self.entries if e.kind == kind]

    def kinds(self) -> set[str]:
        return {e.kind for e in self.entries}

    def hashes(self) -> dict[str, str]:
        return {e.path: e.sha256 for e in self.entries}

    def resolve(self, entry: ArtifactEntry) -> Path:
        return Path(self.root) / entry.path

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "artifacts": [e.to_dict() for e in self.entries],
        }

    def write(self) -> Path:
        self.path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return self.path

    @classmethod
    def load(cls, path) -> "ArtifactIndex":
        path = Path(path)
        if path.is_dir():
            path = path / INDEX_NAME
        d = json.loads(path.read_text())
        entries = [ArtifactEntry(a["path"], a["kind"], a["sha256"], a.get("meta", {})) for a in d["artifacts"]]
        return cls(path.parent, d.get("config_hash", ""), d["status"], d.get("failed_stage"), d.get("error"), entries)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


class _Writer:
    """Single point through which every artifact reaches disk."""

    def __init__(self, index: ArtifactIndex):
        self.index = index
        Path(index.root).mkdir(parents=True, exist_ok=True)

    def _register(self, rel: str, kind: str, meta: dict | None) -> Path:
        path = Path(self.index.root) / rel
        entry = ArtifactEntry(rel, kind, file_sha256(path), dict(meta or {}))
        self.index.entries = [e for e in self.index.entries if e.path != rel] + [entry]
        return path

    def _target(self, rel: str) -> Path:
        path = Path(self.index.root) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def checkpoint(self, obj, rel: str, kind: str, meta: dict | None = None) -> Path:
        save_checkpoint(obj, self._target(rel), meta)
        return self._register(rel, kind, meta)

    def text(self, rel: str, content: str, kind: str, meta: dict | None = None) -> Path:
        self._target(rel).write_text(content)
        return self._register(rel, kind, meta)

    def with_file(self, rel: str, kind: str, fn, meta: dict | None = None) -> Path:
        fn(self._target(rel))
        return self._register(rel, kind, meta)


def build_dataset(spec: dict) -> Dataset:
    kind = spec["kind"]
    if kind == "blobs":
        return make_blobs(spec.get("classes", 3), spec.get("per_class", 100), spec.get("dim", 2),
                          spec.get("spread", 0.5), spec.get("seed", 0))
    if kind == "rings":
        return make_rings(spec.get("classes", 2), spec.get("per_class", 200), spec.get("noise", 0.1), spec.get("seed", 0))
    return load_idx(spec["images"], spec["labels"], spec.get("limit_per_class"), spec.get("seed", 0))


def load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    data = build_dataset(cfg.dataset)
    return split(data, cfg.dataset.get("val_fraction", 0.2), cfg.dataset.get("split_seed", 0))


@dataclass
class _Run:
    cfg: ExperimentConfig
    out: _Writer
    train_set: Dataset | None = None
    val_set: Dataset | None = None
    init: ModelState | None = None
    syn: object = None
    masks: dict = field(default_factory=dict)  # (family, round) -> SparsityMask; dense is round 0
    trained: dict = field(default_factory=dict)  # (family, round, ordering seed) -> ModelState
    stability_rows: list = field(default_factory=list)
    families: tuple[str, ...] = FAMILIES

    def trained_model(self, family: str, rnd: int, seed: int) -> ModelState:
        key = (family, rnd, int(seed))
        if key not in self.trained:
            mask = self.masks[(family, rnd)]
            start = rewind(self.init, mask) if mask is not None else self.init
            tcfg = replace(self.cfg.train, ordering_seed=int(seed))
            self.trained[key] = train(start, self.train_set, tcfg, mask).model
        return self.trained[key]

    def analysed(self):
        """(family, round) pairs covered by the analyses, dense first."""
        yield "dense", 0
        for fam in self.families:
            for r in range(1, self.cfg.prune.rounds + 1):
                yield fam, r


def _stage_data(run: _Run):
    run.train_set, run.val_set = load_splits(run.cfg)
    # output_dir is left out so a run's artifacts do not depend on where it lives
    d = run.cfg.to_dict()
    d.pop("output_dir")
    run.out.text("config.json", dumps(d), "config")


def _stage_distill(run: _Run):
    cfg = run.cfg
    syn = distill(run.train_set, cfg.arch, cfg.ipc, cfg.distill)
    run.syn = syn
    run.out.checkpoint(syn, "synthetic/synthetic.sdlab", "synthetic_dataset", {"ipc": cfg.ipc})
    seeds = cfg.analysis.eval_seeds
    summary = {"ipc": cfg.ipc, "synthetic_rows": len(syn), "train_rows": len(run.train_set)}
    for name, data in (
        ("synthetic", syn),
        ("random_subset", random_subset(run.train_set, cfg.ipc, cfg.distill.seed)),
        ("real", run.train_set),
    ):
        ev = eval_synthetic(data, cfg.arch, run.val_set, cfg.train, seeds)
        summary[name] = {
            "accuracies": ev.accuracies,
            "mean": ev.mean,
            "std": ev.std,
            "val_loss": ev.val_loss,
            "train_loss": ev.train_loss,
            "loss_gap": ev.loss_gap,
        }
    run.out.text("synthetic/eval.json", dumps(summary), "distill_summary")


def _stage_prune(run: _Run):
    cfg, pc = run.cfg, run.cfg.prune
    run.init = init_model(cfg.arch, cfg.init_seed)
    run.out.checkpoint(run.init, "models/init.sdlab", "model", {"role": "init"})
    run.masks[("dense", 0)] = None
    dense = train(run.init, run.train_set, cfg.train)
    dense_eval = evaluate(dense.model, run.val_set)
    families = {}
    if "imp" in run.families:
        families["imp"] = imp(run.init, run.train_set, pc.rounds, pc.rate, cfg.train, pc.scope, run.val_set)
    if "distilled" in run.families:
        families["distilled"] = distilled_prune(run.init, run.syn, pc.rounds, pc.rate, cfg.train, pc.scope,
                                                real_train=run.train_set, val=run.val_set)
    rows = [{
        "family": "dense", "round": 0, "sparsity": 0.0, "val_loss": dense_eval[0], "val_accuracy": dense_eval[1],
        "points_per_round": 0, "points_to_find_mask": 0,
    }]
    for fam, records in families.items():
        for rec in records:
            run.masks[(fam, rec.round_index)] = rec.mask
            meta = {"family": fam, "round": rec.round_index, "sparsity": rec.sparsity}
            run.out.checkpoint(rec.mask, f"masks/{fam}_round{rec.round_index}.sdlab", "mask", meta)
            run.out.checkpoint(rec.trained.model, f"models/{fam}_round{rec.round_index}.sdlab", "model", meta)
            rows.append({
                "family": fam,
                "round": rec.round_index,
                "sparsity": rec.sparsity,
                "val_loss": rec.trained_eval[0],
                "val_accuracy": rec.trained_eval[1],
                "points_per_round": rec.pruning_dataset_size,
                # the mask after round r took r full training runs to find
                "points_to_find_mask": rec.pruning_dataset_size * rec.round_index,
            })
    summary = {
        "rows": rows,
        "train_rows": len(run.train_set),
        "synthetic_rows": cfg.ipc * cfg.arch.num_classes,
        "epochs": cfg.train.epochs,
    }
    run.out.text("prune/summary.json", dumps(summary), "prune_summary")


def _stage_stability(run: _Run):
    cfg = run.cfg
    for fam, r in run.analysed():
        mask = run.masks[(fam, r)]
        for p, (sa, sb) in enumerate(cfg.seed_pairs):
            a, b = run.trained_model(fam, r, sa), run.trained_model(fam, r, sb)
            sp = sparsity(mask) if mask is not None else 0.0
            meta = {"family": fam, "round": r, "pair": p, "sparsity": sp, "ordering_seeds": [sa, sb]}
            curve = interpolation_curve(a, b, run.train_set, run.val_set, cfg.analysis.num_alphas, meta)
            run.out.checkpoint(curve, f"curves/{fam}_round{r}_pair{p}.sdlab", "curve", meta)
            run.out.with_file(f"curves/{fam}_round{r}_pair{p}.csv", "curve_csv", curve.write_csv, meta)
            bh = barrier_height(curve)
            run.stability_rows.append({
                **meta,
                "barrier_halfway": bh.halfway,
                "barrier_max": bh.max,
                "stable": bool(bh.max <= cfg.analysis.tolerance),
                "endpoint_val_accuracy": [float(curve.val_accuracy[0]), float(curve.val_accuracy[-1])],
            })
    summary = {
        "tolerance": cfg.analysis.tolerance,
        "rows": run.stability_rows,
        "compression": len(run.train_set) / (cfg.ipc * cfg.arch.num_classes),
    }
    run.out.text("stability/summary.json", dumps(summary), "stability_summary")


def _landscape_round(cfg: ExperimentConfig) -> int:
    r = cfg.analysis.landscape_round
    return cfg.prune.rounds if r < 0 else max(1, min(r, cfg.prune.rounds))


def _stage_landscape(run: _Run):
    cfg = run.cfg
    r = _landscape_round(cfg)
    sa, sb = cfg.seed_pairs[0]
    sc = max(cfg.seeds) + 1
    for fam in run.families:
        refs = [run.trained_model(fam, r, s) for s in (sa, sb, sc)]
        plane = plane_from_models(*refs)
        mask = run.masks[(fam, r)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            grid = grid_eval(plane, resolution=cfg.analysis.grid_resolution, data=run.train_set, mask=mask)
        meta = {
            "family": fam,
            "round": r,
            "sparsity": sparsity(mask),
            "ordering_seeds": [sa, sb, sc],
            "projections": [list(project(m, plane)) for m in refs],
        }
        run.out.checkpoint(grid, f"landscape/{fam}_round{r}.sdlab", "grid", meta)
        run.out.with_file(f"landscape/{fam}_round{r}.csv", "grid_csv", grid.write_csv, meta)


def _stage_hessian(run: _Run):
    cfg, an = run.cfg, run.cfg.analysis
    data = run.train_set
    if an.hessian_batch and an.hessian_batch < len(data):
        data = data.subset(np.arange(an.hessian_batch))
    batch = data.batch(np.arange(len(data)))
    rows = []
    for fam, r in run.analysed():
        mask = run.masks[(fam, r)]
        model = run.trained_model(fam, r, cfg.seeds[0])
        diag = hessian_diag_estimate(model, batch, an.hessian_probes, cfg.init_seed, mask)
        st = diag_stats(diag, mask, "stochastic", an.hessian_probes)
        rows.append({"family": fam, "round": r, "sparsity": sparsity(mask) if mask is not None else 0.0, **st.as_row()})
    run.out.text("hessian/stats.json", dumps({"batch_rows": len(batch), "rows": rows}), "hessian_stats")


def _stage_reports(run: _Run):
    from .reports import REPORT_KINDS, emit_report

    for kind in REPORT_KINDS:
        emit_report(run.out.index, kind, writer=run.out)


_STAGE_FUNCS = {
    "data": _stage_data,
    "distill": _stage_distill,
    "prune": _stage_prune,
    "stability": _stage_stability,
    "landscape": _stage_landscape,
    "hessian": _stage_hessian,
    "reports": _stage_reports,
}


def stages_for(*targets: str, families=FAMILIES) -> tuple[str, ...]:
    """``targets`` plus everything they depend on, in execution order.

    Distillation is only needed when the distilled family is requested.
    """
    need: set[str] = set()

    def visit(s):
        if s not in STAGE_DEPS:
            raise ValueError(f"unknown stage {s!r}")
        if s not in need:
            need.add(s)
            for d in STAGE_DEPS[s]:
                visit(d)

    for t in targets:
        visit(t)
    if "distilled" not in families:
        need.discard("distill")
    return tuple(s for s in STAGES if s in need)


def run_pipeline(config: ExperimentConfig, until: str = "reports", families=FAMILIES) -> ArtifactIndex:
    """Run the stage ``until`` and its dependencies, then write the index.

    ``families`` selects the mask families (``imp``, ``distilled``) to build
    and analyse; the dense baseline is always included.

    Raises :class:`StageError` after writing a FAILED index if a stage fails.
    """
    index = ArtifactIndex(Path(config.output_dir), config.digest())
    families = tuple(f for f in FAMILIES if f in families)
    if not families:
        raise ValueError(f"families must name at least one of {FAMILIES}")
    run = _Run(config, _Writer(index), families=families)
    stage = None
    try:
        for stage in stages_for(until, families=families):
            log.info("stage %s", stage)
            _STAGE_FUNCS[stage](run)
    except Exception as exc:
        index.status = "FAILED"
        index.failed_stage = stage
        index.error = f"{type(exc).__name__}: {exc}"
        index.write()
        raise StageError(stage, exc) from exc
    index.status = "ok"
    index.write()
    return index


def writer_for(index: ArtifactIndex) -> _Writer:
    return _Writer(index)
