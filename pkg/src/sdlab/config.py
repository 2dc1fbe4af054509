"""Experiment configuration: a versioned JSON document.

Recognised keys (version 1)::

    {
      "version": 1,
      "dataset": {"kind": "blobs", "classes": 3, "per_class": 100, "dim": 2, "spread": 0.5, "seed": 7,
                  "val_fraction": 0.2, "split_seed": 0},
      "arch": {"kind": "mlp", "layer_sizes": [2, 16, 16, 3]},
      "train": {"epochs": 30, "batch_size": 16, "learning_rate": 0.05, "momentum": 0.9},
      "prune": {"rounds": 3, "rate": 0.2, "scope": "global"},
      "distill": {"ipc": 10, "outer_steps": 500, ...any DistillConfig field...},
      "analysis": {"num_alphas": 21, "grid_resolution": [100, 100], "hessian_probes": 200,
                   "hessian_batch": 0, "tolerance": 0.02, "landscape_round": -1, "eval_seeds": [1, 2, 3]},
      "init_seed": 0,
      "seeds": [1, 2],
      "output_dir": "runs/quick"
    }

``dataset.kind`` is ``blobs``, ``rings`` (keys ``classes``, ``per_class``,
``noise``, ``seed``) or ``idx`` (keys ``images``, ``labels``,
``limit_per_class``, ``seed``). ``seeds`` are data-ordering seeds consumed in
consecutive pairs by the stability analysis; they must be distinct and even
in number. ``hessian_batch`` 0 means the full training split.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .distill import DistillConfig
from .nn import ArchSpec, TrainConfig
from .pruning import SCOPES

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSpec:
    rounds: int = 3
    rate: float = 0.2
    scope: str = "global"


@dataclass(frozen=True)
class AnalysisSpec:
    num_alphas: int = 21
    grid_resolution: tuple[int, int] = (100, 100)
    hessian_probes: int = 200
    hessian_batch: int = 0
    tolerance: float = 0.02
    landscape_round: int = -1
    eval_seeds: tuple[int, ...] = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    arch: ArchSpec
    train: TrainConfig
    prune: PruneSpec
    ipc: int
    distill: DistillConfig
    analysis: AnalysisSpec
    init_seed: int = 0
    seeds: tuple[int, ...] = (1, 2)
    output_dir: str = "runs/out"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def seed_pairs(self) -> list[tuple[int, int]]:
        s = self.seeds
        return [(s[i], s[i + 1]) for i in range(0, len(s), 2)]

    def to_dict(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "dataset": self.dataset,
            "arch": self.arch.to_dict(),
            "train": {k: v for k, v in asdict(self.train).items() if k != "ordering_seed"},
            "prune": asdict(self.prune),
            "distill": {"ipc": self.ipc, **asdict(self.distill)},
            "analysis": {**asdict(self.analysis)},
            "init_seed": self.init_seed,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }
        d["analysis"]["grid_resolution"] = list(self.analysis.grid_resolution)
        d["analysis"]["eval_seeds"] = list(self.analysis.eval_seeds)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _pick(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


_DATASET_KEYS = {
    "blobs": {"kind", "classes", "per_class", "dim", "spread", "seed", "val_fraction", "split_seed"},
    "rings": {"kind", "classes", "per_class", "noise", "seed", "val_fraction", "split_seed"},
    "idx": {"kind", "images", "labels", "limit_per_class", "seed", "val_fraction", "split_seed"},
}


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    d = copy.deepcopy(raw)
    version = d.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    allowed = {"dataset", "arch", "train", "prune", "distill", "analysis", "init_seed", "seeds", "output_dir", "profile"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    d.pop("profile", None)
    for key in ("dataset", "arch", "train"):
        if key not in d:
            raise ConfigError(f"missing required section {key!r}")
    dataset = d["dataset"]
    kind = dataset.get("kind")
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}")
    extra = set(dataset) - _DATASET_KEYS[kind]
    if extra:
        raise ConfigError(f"unknown dataset keys for {kind}: {sorted(extra)}")
    try:
        arch = ArchSpec.from_dict(d["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid arch: {exc}") from exc
    train = _pick(TrainConfig, d["train"], "train")
    prune = _pick(PruneSpec, d.get("prune", {}), "prune")
    if prune.rounds < 1 or not 0 < prune.rate < 1 or prune.scope not in SCOPES:
        raise ConfigError("prune needs rounds >= 1, 0 < rate < 1 and a known scope")
    dist = dict(d.get("distill", {}))
    ipc = int(dist.pop("ipc", 10))
    if ipc < 1:
        raise ConfigError("distill.ipc must be positive")
    distill = _pick(DistillConfig, dist, "distill")
    an = dict(d.get("analysis", {}))
    if "grid_resolution" in an:
        an["grid_resolution"] = tuple(an["grid_resolution"])
    if "eval_seeds" in an:
        an["eval_seeds"] = tuple(an["eval_seeds"])
    analysis = _pick(AnalysisSpec, an, "analysis")
    if analysis.num_alphas < 3 or min(analysis.grid_resolution) < 2 or analysis.hessian_probes < 1:
        raise ConfigError("analysis needs num_alphas >= 3, grid >= 2x2 and hessian_probes >= 1")
    seeds = tuple(int(s) for s in d.get("seeds", (1, 2)))
    if len(seeds) < 2 or len(seeds) % 2 or len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be an even number (>= 2) of distinct ordering seeds")
    if any(s < 0 for s in seeds) or int(d.get("init_seed", 0)) < 0:
        raise ConfigError("seeds must be unsigned")
    return ExperimentConfig(
        dataset=dataset,
        arch=arch,
        train=train,
        prune=prune,
        ipc=ipc,
        distill=distill,
        analysis=analysis,
        init_seed=int(d.get("init_seed", 0)),
        seeds=seeds,
        output_dir=str(d.get("output_dir", "runs/out")),
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(raw)


PROFILES: dict[str, dict] = {
    "quick": {
        "version": 1,
        "dataset": {"kind": "blobs", "classes": 3, "per_class": 100, "dim": 2, "spread": 0.5, "seed": 7,
                    "val_fraction": 0.2, "split_seed": 0},
        "arch": {"kind": "mlp", "layer_sizes": [2, 16, 16, 3]},
        "train": {"epochs": 30, "batch_size": 16, "learning_rate": 0.05, "momentum": 0.9},
        "prune": {"rounds": 3, "rate": 0.2, "scope": "global"},
        "distill": {"ipc": 10, "outer_steps": 300},
        "analysis": {"num_alphas": 21, "grid_resolution": [50, 50], "hessian_probes": 200, "hessian_batch": 0,
                     "tolerance": 0.02, "landscape_round": -1, "eval_seeds": [1, 2, 3, 4, 5]},
        "init_seed": 0,
        "seeds": [1, 2],
        "output_dir": "runs/quick",
    },
    # noisy rings where the dense MLP is unstable to data order
    "rings": {
        "version": 1,
        "dataset": {"kind": "rings", "classes": 2, "per_class": 200, "noise": 0.15, "seed": 3,
                    "val_fraction": 0.2, "split_seed": 0},
        "arch": {"kind": "mlp", "layer_sizes": [2, 32, 32, 2]},
        "train": {"epochs": 50, "batch_size": 16, "learning_rate": 0.2, "momentum": 0.9},
        "prune": {"rounds": 9, "rate": 0.2, "scope": "global"},
        "distill": {"ipc": 10},
        "analysis": {"num_alphas": 11, "grid_resolution": [50, 50], "hessian_probes": 200, "hessian_batch": 0,
                     "tolerance": 0.02, "landscape_round": 4, "eval_seeds": [1, 2, 3, 4, 5]},
        "init_seed": 1,
        "seeds": [101, 102, 201, 202, 301, 302, 401, 402, 501, 502],
        "output_dir": "runs/rings",
    },
    "full": {
        "version": 1,
        "dataset": {"kind": "idx", "images": "data/train-images-idx3-ubyte", "labels": "data/train-labels-idx1-ubyte",
                    "limit_per_class": 100, "seed": 0, "val_fraction": 0.2, "split_seed": 0},
        "arch": {"kind": "convnet", "layer_sizes": [1, 8, 16, 10], "kernel_size": 3, "input_hw": [28, 28]},
        "train": {"epochs": 10, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9},
        "prune": {"rounds": 9, "rate": 0.2, "scope": "global"},
        "distill": {"ipc": 10, "outer_steps": 200, "inner_model_samples": 1, "net_steps": 20, "match_batch": 32},
        "analysis": {"num_alphas": 11, "grid_resolution": [20, 20], "hessian_probes": 20, "hessian_batch": 64,
                     "tolerance": 0.02, "landscape_round": 4, "eval_seeds": [1, 2, 3]},
        "init_seed": 0,
        "seeds": [1, 2],
        "output_dir": "runs/full",
    },
}


def profile(name: str) -> ExperimentConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return from_dict(PROFILES[name])
