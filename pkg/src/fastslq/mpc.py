"""Real-time-iteration MPC loop over the switched-system solver.

Each control step extends the receding horizon so it always covers a
fixed number of complete future modes, rebases the previous policy's
feedforward on the measured state, and performs exactly one solver
iteration warm-started from the stored value functions.  The horizon
tail beyond the last mode is priced by the value function of an
infinite-horizon LQR designed at the final nominal state, recomputed
whenever a mode is appended.

The closed-loop simulator alternates plant stepping with MPC steps at
the control rate, injects disturbances as instantaneous state changes,
and records a per-step log suitable for CSV export.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._jit import resolve_engine
from .errors import DivergentRollout, IntegrationFailure, StepRejected, Unstabilizable
from .integrate import IntegratorSettings, integrate_adaptive
from .lq import linearize_dynamics, quadratize_cost
from .problem import (
    GaitPattern,
    ModeSchedule,
    SwitchedProblem,
    evaluate_cost,
    mode_at,
)
from .riccati import TerminalQuadratic
from .solver import (
    LinearFeedbackPolicy,
    PolicySegment,
    SolverSettings,
    iterate_once,
    project_input,
    rollout,
    solve,
    zero_policy,
)

__all__ = [
    "GaitPattern",
    "MpcSettings",
    "MpcState",
    "MpcStepInfo",
    "Disturbance",
    "ClosedLoopLog",
    "design_terminal_lqr",
    "complete_modes_ahead",
    "extend_horizon",
    "rebase_policy",
    "mpc_step",
    "start_mpc",
    "run_closed_loop",
    "scheduled_goal_offset",
]

_LQR_CHUNK_S = 4.0
_LQR_MAX_HORIZON_S = 400.0
_LQR_NORM_CAP = 1e10
# Detectability shift for auto-derived terminal weights: a zero-weight
# state direction that is only marginally stable (an integrator, e.g. a
# swing-foot coordinate) leaves the Riccati residual floating on
# integration noise and the design never settles.
_LQR_Q_SHIFT = 1e-2


@dataclass(frozen=True)
class MpcSettings:
    """Knobs of the receding-horizon loop.

    ``n_modes_ahead`` is the number of complete future modes the horizon
    must always contain.  ``horizon_trigger`` (seconds) is the guard for
    extension; None means the longest gait phase.  The LQR weights
    default to the final mode's stage-cost Hessian blocks evaluated at
    the linearization point, except that the input weight is scaled up
    by ``lqr_input_scale``: the tail controller runs through the input
    projection, and gains stiff enough to fight the projection
    destabilize the extension rollouts.  Explicit weights are used
    verbatim.
    """

    n_modes_ahead: int = 2
    horizon_trigger: float | None = None
    lqr_state_weight: np.ndarray | None = None
    lqr_input_weight: np.ndarray | None = None
    lqr_input_scale: float = 1.0
    solver: SolverSettings = field(
        default_factory=lambda: SolverSettings(parallel_backward=True)
    )

    def __post_init__(self):
        if self.n_modes_ahead < 1:
            raise ValueError("n_modes_ahead must be >= 1")
        if self.horizon_trigger is not None and self.horizon_trigger <= 0.0:
            raise ValueError("horizon_trigger must be positive")
        if self.lqr_input_scale <= 0.0:
            raise ValueError("lqr_input_scale must be positive")


@dataclass
class MpcStepInfo:
    """Wall-clock and bookkeeping record of one MPC step."""

    latency_s: float
    extend_s: float
    forward_s: float
    lq_s: float
    backward_s: float
    plan_cost: float
    alpha: float
    rejected: bool
    extended: bool
    parallel: bool

    @property
    def phase_sum_s(self) -> float:
        return self.extend_s + self.forward_s + self.lq_s + self.backward_s


@dataclass
class MpcState:
    """Mutable state owned by the MPC loop.

    ``value_functions`` maps absolute mode index to the latest value
    function, warm-starting the partition-parallel backward pass;
    ``plan`` is the most recent accepted (or rebased) nominal
    trajectory, whose final state anchors horizon extensions;
    ``next_gait_position`` is the unrolled-gait counter of the next
    mode to append.
    """

    problem: SwitchedProblem
    gait: GaitPattern
    settings: MpcSettings
    policy: LinearFeedbackPolicy
    plan: object
    value_functions: dict
    terminal_gain: np.ndarray
    terminal_value: TerminalQuadratic
    terminal_input: np.ndarray
    next_gait_position: int
    force_sequential: bool = False
    steps: list = field(default_factory=list)

    @property
    def t_final(self) -> float:
        return self.problem.schedule.t_end

    def plan_costs(self) -> list:
        return [info.plan_cost for info in self.steps]


def design_terminal_lqr(
    subsystem,
    x_lin: np.ndarray,
    state_weight: np.ndarray,
    input_weight: np.ndarray,
    u_lin: np.ndarray | None = None,
    tol: float = 1e-9,
    input_basis: np.ndarray | None = None,
):
    """Infinite-horizon LQR at a linearization point.

    Integrates the matrix Riccati ODE from zero until the algebraic
    residual settles, in horizon chunks; divergence or failure to settle
    within the horizon budget raises :class:`Unstabilizable`.  The
    residual is measured relative to the magnitudes of the equation's
    terms (on stiff problems ``A'S`` dwarfs the achievable absolute
    residual).

    ``input_basis`` (m x k) restricts the design to inputs u_lin + Z w:
    with input directions pinned by mode constraints, a full-space gain
    would command exactly the components the rollout projection removes
    and the executed loop would not be the designed one.  Coordinates
    the restricted linearization can neither move nor sense (zero
    dynamics row and zero effective input row, e.g. a pinned foot
    position) are treated as constants pinned at the linearization
    value: their state-weight rows and dynamics columns are dropped so
    they cannot masquerade as an unstabilizable direction.

    Returns ``(gain, value)`` with ``u = u_lin + gain (x - x_lin)`` and
    ``value`` the quadratic cost-to-go model 0.5 (x - x_lin)' S (x - x_lin).
    """
    x_lin = np.ascontiguousarray(x_lin, dtype=float)
    Q = 0.5 * (np.asarray(state_weight, float) + np.asarray(state_weight, float).T)
    R_full = 0.5 * (np.asarray(input_weight, float) + np.asarray(input_weight, float).T)
    n = x_lin.size
    m = R_full.shape[0]
    if Q.shape != (n, n):
        raise ValueError(f"state weight shape {Q.shape} != ({n}, {n})")
    u_lin = np.zeros(m) if u_lin is None else np.ascontiguousarray(u_lin, dtype=float)
    A, B = linearize_dynamics(subsystem, x_lin, u_lin, 0.0)

    Z = np.eye(m) if input_basis is None else np.ascontiguousarray(input_basis, dtype=float)
    B_eff = B @ Z
    R = Z.T @ R_full @ Z
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ValueError("LQR input weight must be positive definite on the input basis") from None

    frozen = np.nonzero(
        (np.max(np.abs(A), axis=1) < 1e-12) & (np.max(np.abs(B_eff), axis=1) < 1e-12)
    )[0]
    if frozen.size:
        A = A.copy()
        Q = Q.copy()
        A[:, frozen] = 0.0
        Q[frozen, :] = 0.0
        Q[:, frozen] = 0.0

    R_inv = np.linalg.inv(R)
    BRB = B_eff @ R_inv @ B_eff.T

    def riccati(t, y):
        S = y.reshape(n, n)
        S = 0.5 * (S + S.T)
        dS = A.T @ S + S @ A - S @ BRB @ S + Q
        return (0.5 * (dS + dS.T)).reshape(-1)

    def residual_ok(S):
        AS = A.T @ S
        SBS = S @ BRB @ S
        resid = np.linalg.norm(AS + AS.T - SBS + Q)
        scale = 1.0 + 2.0 * np.linalg.norm(AS) + np.linalg.norm(SBS) + np.linalg.norm(Q)
        return float(resid) <= tol * float(scale)

    settings = IntegratorSettings(rel_tol=1e-9, abs_tol=1e-9)
    S = np.zeros((n, n))
    chunks = int(math.ceil(_LQR_MAX_HORIZON_S / _LQR_CHUNK_S))
    for _ in range(chunks):
        try:
            dense = integrate_adaptive(riccati, 0.0, _LQR_CHUNK_S, S.reshape(-1), settings)
        except IntegrationFailure as exc:
            raise Unstabilizable(f"terminal LQR Riccati integration failed: {exc}") from exc
        S = dense.states[-1].reshape(n, n)
        S = 0.5 * (S + S.T)
        norm = float(np.linalg.norm(S))
        if not np.isfinite(norm) or norm > _LQR_NORM_CAP:
            raise Unstabilizable(
                f"terminal LQR Riccati diverged (|S| = {norm:.3e}); linearized pair not stabilizable"
            )
        if residual_ok(S):
            gain = -Z @ (R_inv @ (B_eff.T @ S))
            return gain, TerminalQuadratic(S=S, x_ref=x_lin)
    raise Unstabilizable(
        f"terminal LQR Riccati did not settle within {_LQR_MAX_HORIZON_S:.0f} s of horizon"
    )


def complete_modes_ahead(schedule: ModeSchedule, t: float) -> int:
    """Number of modes whose whole interval still lies ahead of ``t``."""
    return sum(1 for i in range(schedule.num_modes) if schedule.switching_times[i] >= t - 1e-9)


def _lqr_weights(problem: SwitchedProblem, mode: int, x: np.ndarray, u: np.ndarray, settings: MpcSettings):
    if settings.lqr_state_weight is not None and settings.lqr_input_weight is not None:
        return settings.lqr_state_weight, settings.lqr_input_weight
    cost = problem.cost_of_mode(mode)
    _, _, _, Q, R, _ = quadratize_cost(cost, x, u, float(problem.schedule.t_end))
    if settings.lqr_state_weight is not None:
        Q = settings.lqr_state_weight
    else:
        Q = Q + _LQR_Q_SHIFT * np.eye(Q.shape[0])
    if settings.lqr_input_weight is not None:
        R = settings.lqr_input_weight
    else:
        R = settings.lqr_input_scale * R
    return Q, R


def _mode_input_basis(sub, x_lin: np.ndarray, u_lin: np.ndarray, t: float):
    """Orthonormal basis of the mode's feasible input directions.

    Null space of the equality-constraint input Jacobian D; None when
    the mode has no equality constraints (full input space).
    """
    if sub.state_input_constraint_jacobians is None or sub.num_eq_state_input == 0:
        return None
    _, D = sub.state_input_constraint_jacobians(x_lin, u_lin, t)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    _, sv, Vt = np.linalg.svd(D)
    rank = int(np.sum(sv > 1e-10 * max(1.0, sv[0])))
    return np.ascontiguousarray(Vt[rank:].T)


def _cost_reference_state(problem: SwitchedProblem, mode: int, x_guess: np.ndarray, u_guess: np.ndarray, t: float) -> np.ndarray:
    """State minimizing the mode's stage cost, from its quadratization.

    Components the cost puts no weight on keep their ``x_guess`` value.
    """
    cost = problem.cost_of_mode(mode)
    _, q, _, Q, _, _ = quadratize_cost(cost, x_guess, u_guess, t)
    step, *_ = np.linalg.lstsq(Q, q, rcond=None)
    return x_guess - step


def _refresh_terminal_lqr(state: MpcState, x_end: np.ndarray, u_end: np.ndarray):
    """Redesign the terminal LQR for the last mode; returns the anchor used.

    Anchors at the mode's cost reference pose, not at the plan's final
    state: a terminal quadratic centered on a disturbed plan end makes
    the residual offset terminally free, and the loop parks there
    instead of walking back.  The plan end (x_end, u_end) is kept as a
    fallback linearization for costs that pin down no reference.
    """
    problem = state.problem
    last = problem.schedule.num_modes - 1
    sub = problem.subsystems[problem.schedule.subsystem_ids[last]]
    t_lo, _ = problem.schedule.mode_span(last)
    anchors = []
    x_ref = _cost_reference_state(problem, last, x_end, u_end, t_lo)
    if not np.allclose(x_ref, x_end):
        anchors.append((x_ref, _mode_reference_input(problem, last, x_ref, u_end, t_lo)))
    anchors.append((np.asarray(x_end, float), np.asarray(u_end, float)))
    for i, (xa, ua) in enumerate(anchors):
        Q, R = _lqr_weights(problem, last, xa, ua, state.settings)
        basis = _mode_input_basis(sub, xa, ua, t_lo)
        try:
            state.terminal_gain, state.terminal_value = design_terminal_lqr(
                sub, xa, Q, R, u_lin=ua, input_basis=basis
            )
        except Unstabilizable:
            if i == len(anchors) - 1:
                raise
            continue
        state.terminal_input = np.ascontiguousarray(ua, dtype=float)
        return xa, ua


def _mode_reference_input(
    problem: SwitchedProblem, mode: int, x_lin: np.ndarray, u_guess: np.ndarray, t: float
) -> np.ndarray:
    """Stage-cost-minimizing input at ``x_lin`` for one mode.

    For quadratic costs this recovers the mode's reference input (e.g.
    the gravity-compensating stance forces); the result is then
    projected onto the mode's equality constraints so the extension
    feedforward respects the new contact pattern.
    """
    cost = problem.cost_of_mode(mode)
    _, _, r, _, R, _ = quadratize_cost(cost, x_lin, u_guess, t)
    u = u_guess - np.linalg.solve(R, r)
    sub = problem.subsystems[problem.schedule.subsystem_ids[mode]]
    if sub.num_eq_state_input > 0:
        g = np.atleast_1d(np.asarray(sub.state_input_constraints(x_lin, u, t), float))
        _, D = sub.state_input_constraint_jacobians(x_lin, u, t)
        D = np.asarray(D, dtype=float)
        R_inv_Dt = np.linalg.solve(R, D.T)
        u = u - R_inv_Dt @ np.linalg.solve(D @ R_inv_Dt, g)
    return u


def extend_horizon(state: MpcState, t: float) -> bool:
    """Append gait modes until ``n_modes_ahead`` complete modes remain.

    Each appended mode redesigns the terminal LQR for the new mode's
    subsystem (anchored at that mode's reference pose and input, see
    :func:`_refresh_terminal_lqr`) and extends the policy with the
    controller u = ua + K (x - xa) over the new interval.  Returns True
    when the horizon grew.
    """
    trigger = state.settings.horizon_trigger
    if trigger is None:
        trigger = max(state.gait.durations)
    if t < state.problem.schedule.t_start - 1e-9 or t > state.t_final + 1e-9:
        raise ValueError(f"t={t!r} outside the current horizon")

    grew = False
    while (
        complete_modes_ahead(state.problem.schedule, t) < state.settings.n_modes_ahead
        or state.t_final - t < trigger
    ):
        schedule = state.problem.schedule
        new_times = schedule.switching_times + (
            schedule.t_end + state.gait.duration_at_position(state.next_gait_position),
        )
        new_ids = schedule.subsystem_ids + (
            state.gait.id_at_position(state.next_gait_position),
        )
        new_schedule = ModeSchedule(new_times, new_ids)
        if state.problem.rebuild is None:
            raise ValueError("problem has no rebuild hook; cannot extend the horizon")
        state.problem = state.problem.rebuild(new_schedule)
        state.next_gait_position += 1

        x_lin = state.plan.final_state()
        new_mode = new_schedule.num_modes - 1
        lo, hi = new_schedule.mode_span(new_mode)
        u_lin = _mode_reference_input(state.problem, new_mode, x_lin, state.terminal_input, lo)
        xa, ua = _refresh_terminal_lqr(state, x_lin, u_lin)
        uff_row = ua - state.terminal_gain @ xa
        seg = PolicySegment(
            mode=new_mode,
            times=np.array([lo, hi]),
            uff=np.vstack((uff_row, uff_row)),
            gain=np.stack((state.terminal_gain, state.terminal_gain)),
        )
        state.policy = LinearFeedbackPolicy(list(state.policy.segments) + [seg])
        grew = True
    return grew


def rebase_policy(state: MpcState, t0: float, x0: np.ndarray):
    """Re-anchor the policy feedforward on a rollout from (t0, x0).

    Rolls the current policy out from the measured state, then rebuilds
    each overlapping segment's feedforward as u_ff = u_bar - K x_bar at
    the rollout nodes (gains resampled from the same piecewise-linear
    curve), so the policy reproduces this rollout as its nominal.
    Returns ``(policy, trajectory)``.
    """
    problem = state.problem
    compiled = resolve_engine(state.settings.solver.use_numba) and problem.kernels is not None
    traj = rollout(
        problem, state.policy, x0, (t0, state.t_final),
        state.settings.solver.integrator, compiled,
    )
    segments = []
    for seg in traj.segments:
        pseg = state.policy.segment_for_mode(seg.mode)
        K = seg.times.size
        gain = np.empty((K, pseg.gain.shape[1], pseg.gain.shape[2]))
        for k in range(K):
            tq = min(max(float(seg.times[k]), float(pseg.times[0])), float(pseg.times[-1]))
            j = int(np.searchsorted(pseg.times, tq, side="right")) - 1
            j = min(max(j, 0), pseg.times.size - 2)
            dt = pseg.times[j + 1] - pseg.times[j]
            w = 0.0 if dt <= 0.0 else (tq - pseg.times[j]) / dt
            gain[k] = (1.0 - w) * pseg.gain[j] + w * pseg.gain[j + 1]
        uff = seg.inputs - np.einsum("kmn,kn->km", gain, seg.states)
        segments.append(
            PolicySegment(mode=seg.mode, times=seg.times.copy(), uff=uff, gain=gain)
        )
    return LinearFeedbackPolicy(segments), traj


def mpc_step(state: MpcState, t0: float, x0: np.ndarray):
    """One real-time iteration: extend, rebase, single SLQ iteration.

    On a rejected step the rebased policy is returned (a degraded but
    safe update) and the next step's backward pass is forced
    sequential.  The stored policy keeps its pre-rebase feedforward in
    that case: the rebased one is interpolation-rebuilt at rollout
    nodes, and re-rolling the rebuilt copy would drift the nominal.
    Returns ``(policy, latency_seconds)`` and appends a step record.
    """
    x0 = np.ascontiguousarray(x0, dtype=float)
    tic = time.perf_counter()

    t_ext = time.perf_counter()
    extended = extend_horizon(state, t0)
    extend_s = time.perf_counter() - t_ext

    problem = state.problem
    settings = state.settings.solver
    compiled = resolve_engine(settings.use_numba) and problem.kernels is not None

    t_fwd = time.perf_counter()
    prior_policy = state.policy
    rebased, nominal = rebase_policy(state, t0, x0)
    state.policy = rebased
    nominal_cost = evaluate_cost(problem, nominal, compiled)
    rebase_s = time.perf_counter() - t_fwd

    # The parallel pass needs a previous value function per partition;
    # right after an extension the new mode has none, so that step runs
    # one sequential sweep (the same bootstrap the cold start uses).
    covered = all(
        i in state.value_functions for i in range(problem.schedule.num_modes)
    )
    use_parallel = (
        settings.parallel_backward and not state.force_sequential and covered
    )
    rejected = False
    alpha = 0.0
    try:
        outcome = iterate_once(
            problem,
            nominal,
            nominal_cost,
            settings,
            state.value_functions or None,
            t0,
            x0,
            use_parallel,
            compiled,
            terminal_heuristic=state.terminal_value,
        )
        state.policy = outcome.policy
        state.plan = outcome.trajectory
        state.value_functions = {vf.mode: vf for vf in outcome.value_functions}
        # A guard failure at every candidate means the parallel pass's
        # value functions mispredict; refresh them with one sequential
        # sweep, the same medicine as a rejected step.
        state.force_sequential = outcome.fallback
        plan_cost = outcome.cost
        alpha = outcome.alpha
        forward_s = rebase_s + outcome.forward_s
        lq_s = outcome.lq_s
        backward_s = outcome.backward_s
    except StepRejected:
        rejected = True
        state.force_sequential = True
        state.policy = prior_policy
        state.plan = nominal
        plan_cost = nominal_cost
        forward_s = time.perf_counter() - t_fwd
        lq_s = 0.0
        backward_s = 0.0

    latency = time.perf_counter() - tic
    state.steps.append(
        MpcStepInfo(
            latency_s=latency,
            extend_s=extend_s,
            forward_s=forward_s,
            lq_s=lq_s,
            backward_s=backward_s,
            plan_cost=plan_cost,
            alpha=alpha,
            rejected=rejected,
            extended=extended,
            parallel=use_parallel and not rejected,
        )
    )
    return (rebased if rejected else state.policy), latency


def start_mpc(
    problem: SwitchedProblem,
    gait: GaitPattern,
    settings: MpcSettings | None = None,
    initial_policy: LinearFeedbackPolicy | None = None,
    next_gait_position: int | None = None,
) -> MpcState:
    """Cold-start the loop: solve the initial horizon, design the tail LQR.

    The initial solve runs to convergence (sequential bootstrap); every
    subsequent :func:`mpc_step` performs a single warm-started iteration.
    ``next_gait_position`` defaults to the number of modes already in the
    problem's schedule, assuming it was unrolled from gait position 0.
    """
    settings = settings or MpcSettings()
    if initial_policy is None:
        initial_policy = zero_policy(problem)
    result = solve(problem, initial_policy=initial_policy, settings=settings.solver)
    plan = result.trajectory
    x_end = plan.final_state()
    u_end = plan.segments[-1].inputs[-1]

    state = MpcState(
        problem=problem,
        gait=gait,
        settings=settings,
        policy=result.policy,
        plan=plan,
        value_functions={vf.mode: vf for vf in result.value_functions},
        terminal_gain=np.zeros((problem.input_dim, problem.state_dim)),
        terminal_value=TerminalQuadratic(
            S=np.zeros((problem.state_dim, problem.state_dim)), x_ref=x_end
        ),
        terminal_input=np.zeros(problem.input_dim),
        next_gait_position=(
            problem.schedule.num_modes if next_gait_position is None else next_gait_position
        ),
    )
    _refresh_terminal_lqr(state, x_end, u_end)
    return state


@dataclass(frozen=True)
class Disturbance:
    """Instantaneous state change applied when simulated time passes
    ``time`` (a velocity kick is a delta on the velocity components)."""

    time: float
    delta: np.ndarray


@dataclass
class ClosedLoopLog:
    """Row-per-control-tick record of a closed-loop run."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    plan_ids: list = field(default_factory=list)
    latencies_ms: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    diverged: bool = False

    def state_array(self) -> np.ndarray:
        return np.asarray(self.states)

    def time_array(self) -> np.ndarray:
        return np.asarray(self.times)

    def input_array(self) -> np.ndarray:
        return np.asarray(self.inputs)

    def summary(self) -> dict:
        lat = [s.latency_s for s in self.steps]
        out = {
            "ticks": len(self.times),
            "mpc_steps": len(self.steps),
            "diverged": self.diverged,
            "mean_latency_ms": 1e3 * float(np.mean(lat)) if lat else 0.0,
            "max_latency_ms": 1e3 * float(np.max(lat)) if lat else 0.0,
            "mean_rate_hz": (1.0 / float(np.mean(lat))) if lat else 0.0,
            "mean_forward_ms": 1e3 * float(np.mean([s.forward_s for s in self.steps])) if lat else 0.0,
            "mean_lq_ms": 1e3 * float(np.mean([s.lq_s for s in self.steps])) if lat else 0.0,
            "mean_backward_ms": 1e3 * float(np.mean([s.backward_s for s in self.steps])) if lat else 0.0,
            "rejected_steps": sum(1 for s in self.steps if s.rejected),
        }
        if self.states:
            out["final_state"] = [float(v) for v in self.states[-1]]
        return out


def _default_plant(problem, policy, t0, x0, t1, integrator):
    traj = rollout(problem, policy, x0, (t0, t1), integrator)
    return traj.final_state()


def _measured_input(problem: SwitchedProblem, policy: LinearFeedbackPolicy, t: float, x: np.ndarray):
    mode = mode_at(problem.schedule, min(t, problem.schedule.t_end))
    if problem.kernels is not None and policy.has_mode(mode):
        pseg = policy.segment_for_mode(mode)
        params = (problem.kernels.mode_params[mode], (pseg.times, pseg.uff, pseg.gain))
        fn = problem.kernels.input_batch.py_func
        return fn(np.array([float(t)]), np.ascontiguousarray(x, float)[None, :], params)[0]
    u = policy.input_at(t, x)
    sub = problem.subsystems[problem.schedule.subsystem_ids[mode]]
    return project_input(u, x, t, sub)


def run_closed_loop(
    state: MpcState,
    duration: float,
    plant=None,
    disturbances=(),
    control_period: float = 0.05,
    replan_every: int = 1,
) -> ClosedLoopLog:
    """Simulate the plant under MPC for ``duration`` seconds.

    ``plant(problem, policy, t0, x0, t1) -> x1`` advances the physical
    system one control period; the default integrates the problem's own
    dynamics under the policy.  ``replan_every = 0`` disables replanning
    (pure feedback from the initial plan).  Plant divergence terminates
    the run with a partial log and ``diverged`` set.
    """
    if duration <= 0.0 or control_period <= 0.0:
        raise ValueError("duration and control_period must be positive")
    pending = sorted((d for d in disturbances), key=lambda d: d.time)
    pending_idx = 0
    integrator = state.settings.solver.integrator
    steps_before = len(state.steps)

    t = state.problem.schedule.t_start
    x = np.array(state.problem.x0, dtype=float)
    t_end = t + duration

    log = ClosedLoopLog()
    log.times.append(t)
    log.states.append(x.copy())
    log.inputs.append(_measured_input(state.problem, state.policy, t, x))
    log.plan_ids.append(len(state.steps))
    log.latencies_ms.append(0.0)

    tick = 0
    while t < t_end - 1e-9:
        t_next = min(t + control_period, t_end)
        try:
            if plant is None:
                x = _default_plant(state.problem, state.policy, t, x, t_next, integrator)
            else:
                x = plant(state.problem, state.policy, t, x, t_next)
        except DivergentRollout:
            log.diverged = True
            break
        t = t_next
        while pending_idx < len(pending) and pending[pending_idx].time <= t + 1e-12:
            delta = np.asarray(pending[pending_idx].delta, dtype=float)
            x = x + delta
            pending_idx += 1
        tick += 1

        latency_ms = 0.0
        if replan_every > 0 and tick % replan_every == 0 and t < t_end - 1e-9:
            _, latency = mpc_step(state, t, x)
            latency_ms = 1e3 * latency

        log.times.append(t)
        log.states.append(x.copy())
        log.inputs.append(_measured_input(state.problem, state.policy, t, x))
        log.plan_ids.append(len(state.steps))
        log.latencies_ms.append(latency_ms)
    log.steps = list(state.steps[steps_before:])
    return log


def scheduled_goal_offset(x_start: float, x_goal: float, stride: float, cycles_elapsed: float) -> float:
    """Reference position allowed after ``cycles_elapsed`` gait cycles.

    Caps the reference advance at ``stride`` per cycle so long moves walk
    rather than lunge; the harness rebuilds the problem whenever this
    moves by more than a step tolerance.
    """
    if stride <= 0.0:
        raise ValueError("stride must be positive")
    span = x_goal - x_start
    cap = stride * max(cycles_elapsed, 0.0)
    return x_start + float(np.clip(span, -cap, cap))
