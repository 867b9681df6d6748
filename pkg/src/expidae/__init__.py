"""Exponential integrators for semi-linear parabolic systems with linear constraints."""

from .errors import (
    DimensionMismatch,
    ExpidaeError,
    InconsistentInitialData,
    InconsistentState,
    NegativeEnergy,
    NoConvergence,
    NonFinite,
    OrderTooHigh,
    SelfCheckFailed,
    SingularMatrix,
    SingularSaddle,
    ZeroInitialVector,
)
from .flow import DaeOperator, KrylovFlowResult, arnoldi, flow
from .harness import (
    ConvergenceTable,
    ReferenceSolution,
    build_reference,
    emit_csv,
    error_norm,
    run_convergence,
)
from .integrators import (
    ConstrainedSystem,
    Diagnostics,
    SchemeConfig,
    StepState,
    alt_euler_step,
    exponential_euler_step,
    integrate,
    kernel_solve,
    lift_constraint,
    second_order_family_step,
    second_order_step,
)
from .linalg import (
    SaddleFactorization,
    assemble_saddle,
    kernel_project,
    read_matrix_market,
    saddle_solve,
    spmv,
)
from .phi import expm, phi, polyrhs_solution
from .problems import (
    DynBcConfig,
    NonSymConfig,
    Problem,
    ToyConfig,
    build_dynbc,
    build_nonsym,
    build_problem,
    build_toy,
)

__version__ = "0.1.0"
