"""Variance-aware sharpness optimization on synthetic multi-domain problems.

The library half provides analytic test problems, the per-domain objective
pieces, five optimizer step rules sharing one record format, and sharpness
diagnostics. The harness half turns those into seeded, reproducible
experiments with CSV/JSON outputs and optional rendered figures.
"""

from .config import (
    ConfigError,
    ExperimentConfig,
    OptimizerConfig,
    ProblemConfig,
    config_from_dict,
    config_from_file,
    default_toy_config,
    with_optimizer,
)
from .diagnostics import (
    EpochSummary,
    TrainingTrace,
    estimate_sharpness_ascent,
    estimate_sharpness_gradvar,
    heldout_domain_eval,
    normalize_convergence,
    traces_mismatch,
)
from .harness import (
    MaxRhoResult,
    SweepGrid,
    build_problem,
    leave_one_domain_out,
    max_rho_search,
    run_experiment,
    run_seed,
    summarize_trace,
    sweep,
)
from .objective import (
    ConvergenceTracker,
    DomainLossReport,
    PerturbationSpec,
    disam_perturbation_gradient,
    domain_inspired_loss_gradient,
    domain_variance,
    intuitive_weights,
    perturbation_weights,
    variance_gradient,
    vrex_loss_and_gradient,
)
from .optimizers import (
    DivergenceError,
    OptimizerState,
    StepRecord,
    phi_between,
    step_disam,
    step_erm,
    step_intuitive,
    step_sam,
    step_vrex,
)
from .param_math import (
    DELTA_NORM,
    DegenerateGradientError,
    DimensionError,
    as_params,
    axpy,
    l2_norm,
    normalize_to_radius,
)
from .problems import (
    DomainDataset,
    QuadraticDomains,
    SoftmaxMLP,
    eval_mlp,
    eval_quadratic,
    generate_shifted_clusters,
    load_dataset,
    random_quadratic_domains,
    save_dataset,
)
from .rng import philox

__version__ = "0.1.0"
