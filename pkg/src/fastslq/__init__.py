"""Constrained optimal control for switched systems.

The solver iterates rollout, local LQ approximation, a constrained
Riccati backward sweep, and line search.  The backward sweep can run
partition-parallel across the horizon's modes with first-order warm
starts, which is what makes real-time receding-horizon use practical;
a matching MPC loop, a closed-loop simulator, testbed models, and a
scaling benchmark round out the package.

Hot kernels are numba-compiled when numba imports; setting the
environment variable ``FASTSLQ_NUMBA=0`` selects the pure-numpy
interpreted path (same code, same results, slower).
"""

from ._jit import HAVE_NUMBA, default_engine
from .bench import BenchCell, BenchResult, bench_cell, run_benchmark
from .errors import (
    ConfigError,
    DimensionMismatch,
    DivergentRollout,
    FastSlqError,
    IntegrationFailure,
    MaxIterationsReached,
    MaxStepsExceeded,
    NonFiniteCost,
    NonFiniteDerivative,
    NonFiniteJacobian,
    NonFiniteRhs,
    OutOfHorizon,
    OutOfSpan,
    StepSizeUnderflow,
    RankDeficientConstraint,
    RiccatiBlowup,
    StepRejected,
    Unstabilizable,
)
from .integrate import IntegratorSettings, integrate_adaptive
from .lq import LqApproximation, build_lq_approximation, interpolate_lq
from .models import (
    FULL_STANCE,
    PLANAR_INPUT_NAMES,
    PLANAR_STATE_NAMES,
    SWING_FOOT_0,
    SWING_FOOT_1,
    PlanarLeggedModel,
    SwingProfile,
    TrotTask,
    TrotWeights,
    make_lti_problem,
    make_planar_trot_problem,
    reference_input_policy,
    trot_gait,
)
from .mpc import (
    ClosedLoopLog,
    Disturbance,
    MpcSettings,
    MpcState,
    design_terminal_lqr,
    extend_horizon,
    mpc_step,
    run_closed_loop,
    start_mpc,
)
from .problem import (
    GaitPattern,
    ModeSchedule,
    StageCost,
    SubsystemModel,
    SwitchedProblem,
    TerminalCost,
    Trajectory,
    TrajectorySegment,
    evaluate_constraints,
    evaluate_cost,
    mode_at,
)
from .riccati import (
    ProjectedLq,
    TerminalQuadratic,
    ValueFunction,
    evaluate_value_function,
    project_constraints,
    solve_partition_backward,
)
from .solver import (
    LinearFeedbackPolicy,
    PolicySegment,
    SolveReport,
    SolveResult,
    SolverSettings,
    rollout,
    solve,
    zero_policy,
)

__version__ = "0.1.0"

__all__ = [
    "HAVE_NUMBA",
    "default_engine",
    "BenchCell",
    "BenchResult",
    "bench_cell",
    "run_benchmark",
    "ConfigError",
    "DimensionMismatch",
    "DivergentRollout",
    "FastSlqError",
    "IntegrationFailure",
    "MaxIterationsReached",
    "MaxStepsExceeded",
    "NonFiniteCost",
    "NonFiniteDerivative",
    "NonFiniteJacobian",
    "NonFiniteRhs",
    "OutOfHorizon",
    "OutOfSpan",
    "StepSizeUnderflow",
    "RankDeficientConstraint",
    "RiccatiBlowup",
    "StepRejected",
    "Unstabilizable",
    "IntegratorSettings",
    "integrate_adaptive",
    "LqApproximation",
    "build_lq_approximation",
    "interpolate_lq",
    "FULL_STANCE",
    "PLANAR_INPUT_NAMES",
    "PLANAR_STATE_NAMES",
    "SWING_FOOT_0",
    "SWING_FOOT_1",
    "PlanarLeggedModel",
    "SwingProfile",
    "TrotTask",
    "TrotWeights",
    "make_lti_problem",
    "make_planar_trot_problem",
    "reference_input_policy",
    "trot_gait",
    "ClosedLoopLog",
    "Disturbance",
    "MpcSettings",
    "MpcState",
    "design_terminal_lqr",
    "extend_horizon",
    "mpc_step",
    "run_closed_loop",
    "start_mpc",
    "GaitPattern",
    "ModeSchedule",
    "StageCost",
    "SubsystemModel",
    "SwitchedProblem",
    "TerminalCost",
    "Trajectory",
    "TrajectorySegment",
    "evaluate_constraints",
    "evaluate_cost",
    "mode_at",
    "ProjectedLq",
    "TerminalQuadratic",
    "ValueFunction",
    "evaluate_value_function",
    "project_constraints",
    "solve_partition_backward",
    "LinearFeedbackPolicy",
    "PolicySegment",
    "SolveReport",
    "SolveResult",
    "SolverSettings",
    "rollout",
    "solve",
    "zero_policy",
]
