"""Sparsity masks, magnitude pruning and the IMP / distilled-pruning loops.

Both loops rewind surviving weights to their values at initialization after
every round; they differ only in the data used to pick the mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .nn import ArchSpec, ModelState, TrainConfig, TrainedModel, evaluate, layer_slices, prunable_bits, train

log = logging.getLogger(__name__)

SCOPES = ("global", "per_layer")


class LayerWipeoutError(ValueError):
    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"pruning would leave layer {layer!r} with no surviving weights")


@dataclass(eq=False)
class SparsityMask:
    bits: np.ndarray
    prunable: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).copy()
        self.prunable = np.asarray(self.prunable, dtype=bool).copy()
        if self.bits.shape != self.prunable.shape or self.bits.ndim != 1:
            raise ValueError("bits and prunable must be 1-D vectors of equal length")
        if not self.bits[~self.prunable].all():
            raise ValueError("non-prunable (bias) coordinates cannot be masked out")

    @classmethod
    def dense(cls, arch: ArchSpec) -> "SparsityMask":
        prunable = prunable_bits(arch)
        return cls(np.ones_like(prunable), prunable)

    def __len__(self):
        return self.bits.size

    def __eq__(self, other):
        if not isinstance(other, SparsityMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits) and np.array_equal(self.prunable, other.prunable)


def sparsity(mask: SparsityMask) -> float:
    """Fraction of prunable coordinates that are pruned."""
    total = int(mask.prunable.sum())
    if total == 0:
        return 0.0
    return float((mask.prunable & ~mask.bits).sum()) / total


def rewind(init: ModelState, mask: SparsityMask) -> ModelState:
    """Initial weights with pruned coordinates set to exactly zero."""
    if len(mask) != init.params.size:
        raise ValueError("mask and model are not aligned")
    return init.with_params(np.where(mask.bits, init.params, 0.0))


def _smallest(values: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k candidates with smallest |value|, ties to the lower index."""
    idx = np.flatnonzero(candidates)
    order = np.lexsort((idx, np.abs(values[idx])))
    return idx[order[:k]]


def magnitude_prune(trained: ModelState, mask: SparsityMask, fraction: float, scope: str = "global") -> SparsityMask:
    """Remove ``round(fraction * surviving)`` of the surviving prunable weights
    with the smallest magnitude, globally or within each layer."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    if len(mask) != trained.params.size:
        raise ValueError("mask and model are not aligned")
    w = trained.params
    alive = mask.bits & mask.prunable
    bits = mask.bits.copy()
    layers = [(name, ws) for name, ws, _ in layer_slices(trained.arch)]
    if scope == "global":
        k = int(round(fraction * alive.sum()))
        bits[_smallest(w, alive, k)] = False
    else:
        for name, ws in layers:
            local = np.zeros_like(alive)
            local[ws] = alive[ws]
            k = int(round(fraction * local.sum()))
            bits[_smallest(w, local, k)] = False
    for name, ws in layers:
        if alive[ws].any() and not bits[ws].any():
            raise LayerWipeoutError(name)
    return SparsityMask(bits, mask.prunable)


@dataclass(eq=False)
class PruneRunRecord:
    round_index: int
    mask: SparsityMask
    sparsity: float
    pruning_dataset_size: int
    # (loss, accuracy) on real validation data after retraining the masked init on real data
    trained_eval: tuple[float, float] | None = None
    trained: TrainedModel | None = None


def apply_and_retrain(init: ModelState, mask: SparsityMask, real_train, cfg: TrainConfig) -> TrainedModel:
    """Train the rewound, masked initialization on real data."""
    return train(rewind(init, mask), real_train, cfg, mask)


def _fraction_for_round(mask: SparsityMask, total: int, rate: float, round_index: int) -> float:
    # Aim at the exact cumulative schedule so rounding does not accumulate.
    alive = int((mask.bits & mask.prunable).sum())
    target = int(round(total * (1.0 - rate) ** round_index))
    return (alive - target) / alive


def _prune_loop(
    init: ModelState,
    mask_data,
    rounds: int,
    rate: float,
    cfg: TrainConfig,
    scope: str,
    real_train,
    val,
    reuse_training: bool,
) -> list[PruneRunRecord]:
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not 0.0 < rate < 1.0:
        raise ValueError("rate must lie in (0, 1)")
    mask = SparsityMask.dense(init.arch)
    total = int(mask.prunable.sum())
    per_round_points = cfg.epochs * len(mask_data)
    records = []
    trained = apply_and_retrain(init, mask, mask_data, cfg)
    for r in range(1, rounds + 1):
        fraction = _fraction_for_round(mask, total, rate, r)
        mask = magnitude_prune(trained.model, mask, fraction, scope)
        record = PruneRunRecord(r, mask, sparsity(mask), per_round_points)
        retrained = None
        if real_train is not None:
            retrained = apply_and_retrain(init, mask, real_train, cfg)
            record.trained = retrained
            if val is not None:
                record.trained_eval = evaluate(retrained.model, val)
        log.info("round %d: sparsity %.4f", r, record.sparsity)
        records.append(record)
        if r < rounds:
            if reuse_training and retrained is not None:
                trained = retrained
            else:
                trained = apply_and_retrain(init, mask, mask_data, cfg)
    return records


def imp(
    init: ModelState,
    prune_data,
    rounds: int,
    rate_per_round: float,
    cfg: TrainConfig,
    scope: str = "global",
    val=None,
    retrain: bool = True,
) -> list[PruneRunRecord]:
    """Iterative magnitude pruning with rewinding to initialization.

    Each round trains the masked init on ``prune_data``, prunes, and rewinds.
    After round ``r`` the sparsity is ``1 - (1 - rate)**r`` up to one weight.
    """
    real = prune_data if retrain else None
    return _prune_loop(init, prune_data, rounds, rate_per_round, cfg, scope, real, val, True)


def distilled_prune(
    init: ModelState,
    syn,
    rounds: int,
    rate: float,
    cfg: TrainConfig,
    scope: str = "global",
    real_train=None,
    val=None,
) -> list[PruneRunRecord]:
    """Same loop as :func:`imp` with the mask chosen on synthetic data.

    ``trained_eval`` is measured after retraining the masked init on
    ``real_train``. The batch size is capped at the synthetic set size.
    """
    data = syn.to_dataset() if hasattr(syn, "to_dataset") else syn
    syn_cfg = replace(cfg, batch_size=min(cfg.batch_size, len(data)))
    records = _prune_loop(init, data, rounds, rate, syn_cfg, scope, None, None, False)
    if real_train is not None:
        for rec in records:
            rec.trained = apply_and_retrain(init, rec.mask, real_train, cfg)
            if val is not None:
                rec.trained_eval = evaluate(rec.trained.model, val)
    return records
