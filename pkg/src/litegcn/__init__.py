"""Lightweight graph convolutional networks with learned sparse connectivity.

The adjacency basis of a one-block GCN is learned end to end under
orthogonality (sharp per-entry softmax across matrices) and
column-stochasticity (per-column softmax) constraints, with full analytic
gradients, a closed-form sharpness bound for relaxed orthogonality, and the
handcrafted/unconstrained/magnitude-pruning baselines.
"""

from .backend import BACKEND
from .connectivity import (
    AdjacencyBasis,
    ConstraintMode,
    EffectiveBasis,
    anneal,
    basis_forward,
    basis_vjp,
    check_epsilon_orth,
    crispmax_forward,
    crispmax_vjp,
    delta_gap,
    epsilon_orth_bound,
    perturb,
    sparsity_report,
    stochastic_forward,
    stochastic_vjp,
)
from .data import (
    Dataset,
    GraphSample,
    SkeletonGraph,
    Trajectory,
    handcrafted_adjacency,
    load_fpha_sequence,
    load_split,
    power_map_basis,
    synth_dataset,
    temporal_chunking,
)
from .model import (
    GcnModel,
    cross_entropy,
    finite_diff_oracle,
    gc_block,
    gradient_check,
    init_model,
    load_model,
    model_backward,
    model_forward,
    save_model,
)
from .train import (
    RunMetrics,
    TrainConfig,
    adam_step,
    adapt_lr,
    evaluate,
    magnitude_prune,
    run_ablation,
    train,
)

__version__ = "0.1.0"
