"""Pruning with distilled data: a small numpy laboratory.

Submodules: ``nn`` (MLP/ConvNet, training), ``datasets``, ``pruning``,
``distill``, ``stability``, ``landscape``, ``hessian``, ``checkpoint``,
``config``, ``harness``, ``reports`` and ``cli``.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, profile
from .datasets import Dataset, LabeledBatch, load_idx, make_blobs, make_rings, split
from .distill import DistillConfig, SyntheticDataset, distill, eval_synthetic, random_subset
from .harness import ArtifactIndex, StageError, run_pipeline
from .hessian import diag_stats, hessian_diag_estimate, hessian_diag_exact
from .landscape import grid_eval, plane_from_models, project
from .nn import ArchSpec, ModelState, TrainConfig, evaluate, init_model, loss_and_grad, sgd_step, train
from .pruning import SparsityMask, apply_and_retrain, distilled_prune, imp, magnitude_prune, rewind, sparsity
from .reports import emit_report
from .stability import barrier_height, barrier_ratio, instability_analysis, interpolation_curve, stability_verdict

__version__ = "0.1.0"
