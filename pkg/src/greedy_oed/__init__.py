"""Greedy D-optimal sensor selection for linear time-invariant inverse problems."""

from .errors import (
    AllInfeasible,
    BudgetExceeded,
    CorruptFile,
    DimensionMismatch,
    IndexOutOfRange,
    InfeasibleRound,
    InvalidConfig,
    InvalidMatrix,
    NonFiniteResult,
    NotPositiveDefinite,
    OedError,
    PropertyViolation,
    SingularFactor,
    TooLarge,
    WorkerFailure,
)
from .kstore import KStore, open_store, write_k
from .linalg import (
    LowerTriangularFactor,
    append_block_column,
    cholesky_in_place,
    logdet_from_factor,
    schur_complement,
    solve_lower_triangular,
)
from .lti import (
    DataSpaceHessian,
    LtiProblem,
    PriorSpec,
    WeightSpec,
    apply_adjoint,
    apply_forward,
    assemble_k,
    make_wave_problem,
    pointwise_variance,
    posterior_covariance_small,
)
from .parallel import pipelined_evaluate, reduce_argmax, run_parallel_greedy
from .selector import (
    SelectionState,
    SelectionTrace,
    exact_select,
    greedy_select,
    naive_select,
    random_baseline,
    score_candidate,
    submodularity_probe,
)

__version__ = "0.1.0"
