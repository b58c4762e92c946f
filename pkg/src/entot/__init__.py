"""Entropic optimal transport: Greenkhorn, APDAMD and their baselines."""

from .core import (
    ConstraintOperator,
    CostMatrix,
    DegenerateInstanceError,
    DomainError,
    DualPotentials,
    ExponentOverflowError,
    Histogram,
    OTError,
    RegularizedInstance,
    bound_R,
    bound_R_hat,
    dual_f,
    exp_dual_phi,
    gain_rho,
    grad_exp_phi,
    grad_f,
    grad_phi,
    is_feasible,
    primal_from_dual,
    primal_objective,
    residual_E,
    reweight_marginals,
    round_to_polytope,
    scaling_matrix,
    schedule_eta_eps,
    semi_dual_phi,
)
from .harness import ComparisonSeries, RunRecord, competitive_ratio, emit_outputs, metric_d, run_benchmark
from .instances import (
    GrayImage,
    InstanceSpec,
    gen_synthetic_image,
    image_to_histogram,
    l1_cost_matrix,
    load_idx_images,
    mnist_histogram,
    synthetic_instance,
    uniform_instance,
)
from .oracle import ExactSolution, exact_ot, reference_dual_optimum
from .solvers import (
    ApproxResult,
    MirrorMap,
    SolverFailure,
    SolverTrace,
    Status,
    apdagd,
    apdamd,
    approx_ot,
    greenkhorn,
    sinkhorn,
)

__version__ = "0.1.0"
