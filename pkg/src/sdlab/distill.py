"""Dataset distillation by per-class gradient matching.

Each outer step samples fresh network initializations, optionally advances
each one a few SGD steps on the current synthetic set, and compares per-class
parameter gradients on a real batch with those on the synthetic rows. The
matching loss is a sum over layers and classes of ``1 - cos(g_real, g_syn)``.

Its gradient with respect to the synthetic features needs the mixed second
derivative of the training loss. With ``v = d match / d g_syn`` we use

    d match / d x = d/dx <v, grad_w L(w; x)>
                  ~ (grad_x L(w + eps*v; x) - grad_x L(w - eps*v; x)) / (2*eps)

so only first-order backprop (with input gradients) is required.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datasets import Dataset
from .nn import ArchSpec, TrainConfig, _loss_grad_arrays, evaluate, init_model, layer_slices, train

log = logging.getLogger(__name__)

INIT_MODES = ("real_sample", "class_mean", "noise")


class DistillationDivergedError(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"gradient-matching loss became non-finite at outer step {step}")


@dataclass(frozen=True)
class DistillConfig:
    outer_steps: int = 500
    inner_model_samples: int = 4
    match_batch: int = 128
    syn_lr: float = 0.005
    init_mode: str = "real_sample"
    seed: int = 0
    # SGD steps taken on the synthetic set before matching (uniform in [0, net_steps])
    net_steps: int = 100
    net_lr: float = 0.05
    syn_momentum: float = 0.5

    def __post_init__(self):
        if self.outer_steps < 0 or self.inner_model_samples < 1 or self.match_batch < 1:
            raise ValueError("distillation counts must be positive")
        if not self.syn_lr > 0 or not self.net_lr > 0:
            raise ValueError("learning rates must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.net_steps < 0:
            raise ValueError("net_steps must be >= 0")

    def digest(self, **extra) -> str:
        payload = json.dumps({**asdict(self), **extra}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(eq=False)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    ipc: int
    class_count: int
    source_name: str = ""
    distill_config_hash: str = ""
    match_loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        counts = np.bincount(self.labels, minlength=self.class_count)
        if len(counts) != self.class_count or not (counts == self.ipc).all():
            raise ValueError(f"synthetic set must hold exactly {self.ipc} rows per class")
        if self.features.shape[0] != self.labels.size:
            raise ValueError("one label per synthetic row")
        if not np.isfinite(self.features).all():
            raise ValueError("synthetic features must be finite")

    def __len__(self):
        return self.labels.size

    def to_dataset(self) -> Dataset:
        return Dataset(self.features, self.labels, self.class_count, f"syn[{self.source_name}]")


def _initial_features(real: Dataset, ipc: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    k = real.class_count
    rows = []
    for c in range(k):
        members = real.features[real.labels == c]
        if mode == "real_sample":
            rows.append(members[rng.choice(len(members), ipc, replace=False)])
        elif mode == "class_mean":
            rows.append(np.repeat(members.mean(axis=0, keepdims=True), ipc, axis=0))
        else:
            mu, sd = real.features.mean(axis=0), real.features.std(axis=0) + 1e-8
            rows.append(mu + sd * rng.standard_normal((ipc, real.dim)))
    return np.concatenate(rows)


def random_subset(real: Dataset, ipc: int, seed: int) -> Dataset:
    """``ipc`` real rows per class drawn with ``seed``; the matching baseline."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    idx = np.concatenate(
        [np.sort(rng.choice(np.flatnonzero(real.labels == c), ipc, replace=False)) for c in range(real.class_count)]
    )
    return real.subset(idx, f"subset[{real.name}]")


def _layer_cos_distance(g_real, g_syn, slices):
    """Sum over layers of ``1 - cos``, and its gradient with respect to g_syn."""
    total = 0.0
    grad = np.zeros_like(g_syn)
    for sl in slices:
        a, b = g_real[sl], g_syn[sl]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-12 or nb < 1e-12:
            continue
        cos = float(a @ b) / (na * nb)
        total += 1.0 - cos
        grad[sl] = -(a / (na * nb) - cos * b / (nb * nb))
    return total, grad


def matching_loss(arch, params, real_batches, syn_x, syn_y, slices, want_grad=True):
    """Per-class gradient-matching loss at ``params`` and its gradient w.r.t. ``syn_x``."""
    total = 0.0
    dx = np.zeros_like(syn_x)
    scale = 1e-3 * (1.0 + np.abs(params).max())
    for c, (xr, yr) in enumerate(real_batches):
        rows = syn_y == c
        _, g_real, _ = _loss_grad_arrays(arch, params, xr, yr)
        _, g_syn, _ = _loss_grad_arrays(arch, params, syn_x[rows], syn_y[rows])
        dist, v = _layer_cos_distance(g_real, g_syn, slices)
        total += dist
        if not want_grad:
            continue
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        eps = scale / nv
        _, _, dx_plus = _loss_grad_arrays(arch, params + eps * v, syn_x[rows], syn_y[rows], want_input=True)
        _, _, dx_minus = _loss_grad_arrays(arch, params - eps * v, syn_x[rows], syn_y[rows], want_input=True)
        dx[rows] += (dx_plus - dx_minus) / (2.0 * eps)
    return total, dx


def distill(real: Dataset, arch: ArchSpec, ipc: int, cfg: DistillConfig) -> SyntheticDataset:
    """Learn ``ipc`` synthetic rows per class whose training gradients match real data."""
    k = real.class_count
    counts = real.class_counts()
    if ipc < 1 or (counts < ipc).any():
        raise ValueError(f"every class needs at least ipc={ipc} real rows")
    if real.dim != arch.input_dim or k != arch.num_classes:
        raise ValueError("dataset and architecture disagree on input size or class count")
    rng = np.random.Generator(np.random.Philox(key=int(cfg.seed)))
    syn_x = _initial_features(real, ipc, cfg.init_mode, rng)
    syn_y = np.repeat(np.arange(k), ipc)
    slices = [np.r_[w, b] for _, w, b in layer_slices(arch)]
    class_rows = [np.flatnonzero(real.labels == c) for c in range(k)]
    velocity = np.zeros_like(syn_x)
    history = []
    net_batch = min(len(syn_y), 2 * k)
    model_seed = 0
    for step in range(cfg.outer_steps):
        total = 0.0
        grad = np.zeros_like(syn_x)
        real_batches = []
        for rows in class_rows:
            pick = rng.choice(rows, min(cfg.match_batch, rows.size), replace=False)
            real_batches.append((real.features[pick], real.labels[pick]))
        for _ in range(cfg.inner_model_samples):
            model_seed += 1
            model = init_model(arch, (int(cfg.seed) << 32) + model_seed)
            steps = int(rng.integers(0, cfg.net_steps + 1))
            params = model.params
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    for _ in range(steps):
                        pick = rng.choice(len(syn_y), net_batch, replace=False)
                        _, g, _ = _loss_grad_arrays(arch, params, syn_x[pick], syn_y[pick])
                        params = params - cfg.net_lr * g
                    loss, dx = matching_loss(arch, params, real_batches, syn_x, syn_y, slices)
            except FloatingPointError as exc:
                raise DistillationDivergedError(step) from exc
            total += loss
            grad += dx
        if not np.isfinite(total) or not np.isfinite(grad).all():
            raise DistillationDivergedError(step)
        history.append(total / cfg.inner_model_samples)
        velocity = cfg.syn_momentum * velocity + grad
        syn_x = syn_x - cfg.syn_lr * velocity
        if not np.isfinite(syn_x).all():
            raise DistillationDivergedError(step)
        if step % 50 == 0:
            log.debug("distill step %d matching loss %.4f", step, history[-1])
    digest = cfg.digest(ipc=ipc, arch=arch.to_dict(), source=real.name, n=len(real))
    return SyntheticDataset(syn_x, syn_y, ipc, k, real.name, digest, history)


@dataclass
class EvalSummary:
    accuracies: list[float]
    mean: float
    std: float
    # mean validation loss and mean loss on the training rows themselves
    val_loss: float = float("nan")
    train_loss: float = float("nan")

    @property
    def loss_gap(self) -> float:
        return abs(self.val_loss - self.train_loss)


def eval_synthetic(syn, arch: ArchSpec, val: Dataset, cfg: TrainConfig, seeds) -> EvalSummary:
    """Train a fresh model per seed on ``syn`` (init seed and ordering seed),
    report validation accuracy moments (population std) and mean losses."""
    data = syn.to_dataset() if hasattr(syn, "to_dataset") else syn
    cfg = replace(cfg, batch_size=min(cfg.batch_size, len(data)))
    accs, val_losses, train_losses = [], [], []
    for s in seeds:
        trained = train(init_model(arch, int(s)), data, replace(cfg, ordering_seed=int(s)))
        loss, acc = evaluate(trained.model, val)
        accs.append(acc)
        val_losses.append(loss)
        train_losses.append(evaluate(trained.model, data)[0])
    arr = np.asarray(accs)
    return EvalSummary(accs, float(arr.mean()), float(arr.std()), float(np.mean(val_losses)), float(np.mean(train_losses)))
