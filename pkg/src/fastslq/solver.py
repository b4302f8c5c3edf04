"""SLQ iteration driver: rollout, LQ build, backward pass, line search.

One iteration rolls the current policy forward (with best-effort
inequality projection of every evaluated input), builds the LQ model
along the rollout, integrates the constrained Riccati sweep backward
over the mode partitions, and line-searches the feedforward step.

The backward pass runs in two flavors.  The sequential sweep solves
partitions from the last mode down, chaining exact boundary values.  The
partition-parallel sweep solves all partitions concurrently, taking each
partition's boundary values from the PREVIOUS iteration's neighbor value
function corrected to first order at the current nominal state; a guard
in the line search rejects steps whose realized cost strays too far from
the value-function prediction, falling back to a sequential sweep.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from ._jit import resolve_engine
from .errors import DivergentRollout, IntegrationFailure, StepRejected
from .integrate import IntegratorSettings, run_core
from .lq import LqApproximation, build_lq_approximation, fd_jacobian, merge_terminals
from .problem import (
    SubsystemModel,
    SwitchedProblem,
    Trajectory,
    TrajectorySegment,
    evaluate_cost,
)
from .riccati import (
    TerminalQuadratic,
    ValueFunction,
    evaluate_value_function,
    final_values,
    solve_partition_backward,
)

ROLLOUT_NORM_CAP = 1e9

_POOLS: dict = {}


def _pool(workers: int) -> ThreadPoolExecutor:
    pool = _POOLS.get(workers)
    if pool is None:
        pool = ThreadPoolExecutor(max_workers=workers)
        _POOLS[workers] = pool
    return pool


@dataclass(frozen=True)
class PolicySegment:
    """Affine policy nodes over one mode: u = uff(t) + gain(t) x."""

    mode: int
    times: np.ndarray
    uff: np.ndarray
    gain: np.ndarray


class LinearFeedbackPolicy:
    """Piecewise affine state-feedback policy, one segment per mode.

    Within a segment the feedforward and gain interpolate linearly in
    time; outside its node span a segment holds its boundary values.
    """

    def __init__(self, segments: Sequence[PolicySegment]):
        segs = sorted(segments, key=lambda s: float(s.times[0]))
        if not segs:
            raise ValueError("policy needs at least one segment")
        self._segments = tuple(segs)
        self._by_mode = {seg.mode: seg for seg in segs}
        if len(self._by_mode) != len(segs):
            raise ValueError("duplicate policy segment for a mode")
        self._starts = np.array([float(seg.times[0]) for seg in segs])

    @property
    def segments(self) -> tuple:
        return self._segments

    @property
    def t_start(self) -> float:
        return float(self._segments[0].times[0])

    @property
    def t_end(self) -> float:
        return float(self._segments[-1].times[-1])

    def segment_for_mode(self, mode: int) -> PolicySegment:
        seg = self._by_mode.get(mode)
        if seg is None:
            raise ValueError(f"policy has no segment for mode {mode}")
        return seg

    def has_mode(self, mode: int) -> bool:
        return mode in self._by_mode

    def segment_at(self, t: float) -> PolicySegment:
        k = int(np.searchsorted(self._starts, t, side="right")) - 1
        k = min(max(k, 0), len(self._segments) - 1)
        return self._segments[k]

    def input_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """Raw affine policy input (no inequality projection)."""
        seg = self.segment_at(t)
        return _kernels.policy_input.py_func(
            seg.times, seg.uff, seg.gain, float(t), np.asarray(x, float)
        )


@dataclass(frozen=True)
class SolverSettings:
    """Knobs of the SLQ iteration.

    ``parallel_backward`` enables the partition-parallel sweep with
    ``num_threads`` workers (1 keeps the fork structure but runs inline).
    ``use_numba`` overrides the process default engine; None defers to it.
    ``rho`` weights state-only equality residuals in the projected cost.

    The default integrator caps steps at 20 ms: rollout nodes double as
    the LQ sampling grid (coefficients interpolate linearly in between),
    so on smooth dynamics an uncapped adaptive grid would be far too
    coarse for accurate value functions and feedforward terms.

    Note ``line_search_alphas`` must be strictly decreasing within (0, 1].
    """

    max_iterations: int = 50
    convergence_tol: float = 1e-4
    rho: float = 100.0
    line_search_alphas: tuple = (1.0, 0.5, 0.25, 0.125, 0.0625)
    line_search_guard: float = 0.1
    num_threads: int = 1
    parallel_backward: bool = False
    integrator: IntegratorSettings = field(default_factory=lambda: IntegratorSettings(max_step=0.02))
    use_numba: bool | None = None

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.line_search_alphas)
        if not alphas or any(not (0.0 < a <= 1.0) for a in alphas):
            raise ValueError("line-search alphas must lie in (0, 1]")
        if any(b >= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("line-search alphas must be strictly decreasing")
        object.__setattr__(self, "line_search_alphas", alphas)
        if self.line_search_guard <= 0.0:
            raise ValueError("line-search guard must be positive")
        if self.max_iterations < 1 or self.num_threads < 1:
            raise ValueError("max_iterations and num_threads must be >= 1")
        if self.convergence_tol <= 0.0 or self.rho < 0.0:
            raise ValueError("convergence_tol must be > 0 and rho >= 0")


@dataclass
class SolveReport:
    """Per-iteration record of the solve.

    Lists align by iteration; a rejected iteration keeps the previous
    cost, stores alpha = 0 and still accounts its phase times.
    """

    initial_cost: float = math.nan
    costs: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    expected_costs: list = field(default_factory=list)
    forward_s: list = field(default_factory=list)
    lq_s: list = field(default_factory=list)
    backward_s: list = field(default_factory=list)
    parallel_sweeps: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    step_rejections: int = 0
    engine: str = "numpy"

    @property
    def final_cost(self) -> float:
        return self.costs[-1] if self.costs else self.initial_cost

    def phase_totals(self) -> dict:
        return {
            "forward_s": float(sum(self.forward_s)),
            "lq_s": float(sum(self.lq_s)),
            "backward_s": float(sum(self.backward_s)),
        }


@dataclass
class SolveResult:
    policy: LinearFeedbackPolicy
    value_functions: list
    trajectory: Trajectory
    report: SolveReport
    cost: float


def _mode_spans(problem: SwitchedProblem, t_span: tuple) -> list:
    """(mode index, lo, hi) for every mode overlapping the span."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    out = []
    times = problem.schedule.switching_times
    for i in range(problem.schedule.num_modes):
        lo = max(times[i], t0)
        hi = min(times[i + 1], t1)
        if hi - lo > 1e-12:
            out.append((i, lo, hi))
    if not out:
        raise ValueError(f"span {t_span!r} overlaps no mode interval")
    return out


def zero_policy(problem: SwitchedProblem, t_span: tuple | None = None) -> LinearFeedbackPolicy:
    """Zero feedforward, zero gain over every mode in the span."""
    span = t_span or (problem.schedule.t_start, problem.schedule.t_end)
    m, n = problem.input_dim, problem.state_dim
    segs = []
    for mode, lo, hi in _mode_spans(problem, span):
        segs.append(
            PolicySegment(
                mode=mode,
                times=np.array([lo, hi]),
                uff=np.zeros((2, m)),
                gain=np.zeros((2, m, n)),
            )
        )
    return LinearFeedbackPolicy(segs)


def project_input(u: np.ndarray, x: np.ndarray, t: float, sub: SubsystemModel) -> np.ndarray:
    """Best-effort projection of ``u`` onto the linearized feasible set.

    Inputs already satisfying every inequality row pass through
    unchanged.  Violated rows are resolved by projecting onto each row's
    linearization plane in turn, for up to 5 passes; remaining violation
    is tolerated by design (feasibility is favored over optimality).
    """
    if sub.inequality_constraints is None or sub.num_ineq == 0:
        return np.asarray(u, float)
    u = np.array(u, dtype=float)
    x = np.asarray(x, float)
    for _ in range(5):
        res = np.atleast_1d(np.asarray(sub.inequality_constraints(x, u, t), float))
        viol = np.where(res < 0.0)[0]
        if viol.size == 0:
            break
        if sub.inequality_jacobians is not None:
            _, dhu = sub.inequality_jacobians(x, u, t)
            dhu = np.asarray(dhu, float)
        else:
            dhu = fd_jacobian(lambda uv: sub.inequality_constraints(x, uv, t), u, sub.num_ineq)
        u_new = u.copy()
        for j in viol:
            g = dhu[j]
            gg = float(g @ g)
            if gg <= 1e-14:
                continue
            val = float(res[j]) + float(g @ (u_new - u))
            if val < 0.0:
                u_new = u_new - (val / gg) * g
        u = u_new
    return u


def rollout(
    problem: SwitchedProblem,
    policy: LinearFeedbackPolicy,
    x0: np.ndarray | None = None,
    t_span: tuple | None = None,
    integrator: IntegratorSettings | None = None,
    compiled: bool | None = None,
) -> Trajectory:
    """Closed-loop forward integration of the switched dynamics.

    Integrates mode by mode, carrying the state across switches, and
    records projected policy inputs at every accepted node and midpoint.
    """
    span = t_span or (problem.schedule.t_start, problem.schedule.t_end)
    x = np.ascontiguousarray(problem.x0 if x0 is None else x0, dtype=float)
    integ = integrator or IntegratorSettings()
    use = resolve_engine(compiled) and problem.kernels is not None

    segments = []
    for mode, lo, hi in _mode_spans(problem, span):
        pseg = policy.segment_for_mode(mode)
        if problem.kernels is not None:
            params = (
                problem.kernels.mode_params[mode],
                (pseg.times, pseg.uff, pseg.gain),
            )
            times, ys, fs, status, attempts = run_core(
                problem.kernels.rollout_rhs, params, lo, hi, x, integ, ROLLOUT_NORM_CAP, use
            )
            _raise_rollout(status, attempts, times, mode)
            input_fn = problem.kernels.input_batch.get(use)
            inputs = input_fn(times, ys, params)
            mid_states = _kernels.hermite_midpoints.get(use)(times, ys, fs)
            mid_times = 0.5 * (times[:-1] + times[1:])
            mid_inputs = input_fn(mid_times, mid_states, params)
        else:
            sub = problem.subsystems[problem.schedule.subsystem_ids[mode]]

            def rhs(t, y, _p, _sub=sub, _pseg=pseg):
                u = _kernels.policy_input.py_func(_pseg.times, _pseg.uff, _pseg.gain, t, y)
                u = project_input(u, y, t, _sub)
                return np.asarray(_sub.dynamics(y, u, t), dtype=float)

            times, ys, fs, status, attempts = run_core(
                rhs, (), lo, hi, x, integ, ROLLOUT_NORM_CAP, False
            )
            _raise_rollout(status, attempts, times, mode)
            inputs = np.array(
                [
                    project_input(
                        _kernels.policy_input.py_func(pseg.times, pseg.uff, pseg.gain, times[k], ys[k]),
                        ys[k],
                        times[k],
                        sub,
                    )
                    for k in range(times.size)
                ]
            )
            mid_states = _kernels.hermite_midpoints.py_func(times, ys, fs)
            mid_times = 0.5 * (times[:-1] + times[1:])
            mid_inputs = np.array(
                [
                    project_input(
                        _kernels.policy_input.py_func(
                            pseg.times, pseg.uff, pseg.gain, mid_times[k], mid_states[k]
                        ),
                        mid_states[k],
                        mid_times[k],
                        sub,
                    )
                    for k in range(mid_times.size)
                ]
            )
        segments.append(
            TrajectorySegment(
                mode=mode,
                times=times,
                states=ys,
                derivs=fs,
                inputs=inputs,
                mid_states=mid_states,
                mid_inputs=mid_inputs,
            )
        )
        x = ys[-1].copy()
    return Trajectory(segments)


def _raise_rollout(status, attempts, times, mode):
    if status == _kernels.INT_OK:
        return
    if status == _kernels.INT_DIVERGED:
        raise DivergentRollout(
            f"rollout diverged in mode {mode} near t={times[-1]:.6g} (norm cap {ROLLOUT_NORM_CAP:.0e})"
        )
    raise IntegrationFailure(
        f"rollout failed in mode {mode} (status {status}, {attempts} attempts, t={times[-1]:.6g})"
    )


def update_controller(
    vfs: Sequence[ValueFunction],
    nominal: Trajectory,
    alpha: float,
    compiled: bool = False,
) -> LinearFeedbackPolicy:
    """Assemble the updated affine policy from the backward-sweep rows.

    The feedforward applies the cost-descent step scaled by ``alpha`` and
    the constraint-restoration step at full magnitude; subtracting
    gain @ xbar re-centers the feedback on absolute states.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    seg_by_mode = {seg.mode: seg for seg in nominal.segments}
    hermite = _kernels.hermite_batch.get(compiled)
    input_interp = _kernels.input_interp_batch.get(compiled)
    segments = []
    for vf in vfs:
        seg = seg_by_mode[vf.mode]
        xb = hermite(seg.times, seg.states, seg.derivs, vf.times)
        ub = input_interp(seg.times, seg.inputs, seg.mid_inputs, vf.times)
        uff = ub + alpha * vf.step_ff + vf.restore_ff - np.einsum("jmn,jn->jm", vf.gain, xb)
        segments.append(PolicySegment(mode=vf.mode, times=vf.times, uff=uff, gain=vf.gain))
    return LinearFeedbackPolicy(segments)


def backward_pass(
    lq: LqApproximation,
    prev_vfs: dict | None,
    nominal: Trajectory,
    settings: SolverSettings,
    compiled: bool = False,
    terminal_heuristic: TerminalQuadratic | None = None,
    parallel: bool | None = None,
) -> list:
    """Solve every partition's backward sweep; sequential or parallel.

    ``prev_vfs`` maps absolute mode index to the previous iteration's
    value function.  The parallel sweep uses them for boundary values;
    partitions whose successor has no stored value function (freshly
    appended horizon modes) are solved first, in reverse order, and their
    fresh results used instead.
    """
    modes = lq.modes
    N = len(modes)
    use_parallel = settings.parallel_backward if parallel is None else parallel
    if prev_vfs is None:
        use_parallel = False

    terminals = [md.terminal for md in modes]
    end_states = [md_seg.states[-1] for md_seg in nominal.segments]
    if terminal_heuristic is not None:
        terminals[N - 1] = merge_terminals(
            terminals[N - 1], terminal_heuristic.expand_at(end_states[N - 1])
        )

    def solve_one(i, next_vf):
        finals = final_values(terminals[i], next_vf, end_states[i], float(modes[i].times[-1]))
        return solve_partition_backward(
            modes[i], finals, nominal, settings.integrator, settings.rho, compiled
        )

    vfs = [None] * N
    if not use_parallel:
        next_vf = None
        for i in reversed(range(N)):
            vfs[i] = solve_one(i, next_vf)
            next_vf = vfs[i]
        return vfs

    ready = [i for i in range(N) if i == N - 1 or modes[i + 1].mode in prev_vfs]
    deferred = sorted(set(range(N)) - set(ready), reverse=True)

    def neighbor(i):
        return None if i == N - 1 else prev_vfs[modes[i + 1].mode]

    if settings.num_threads > 1 and len(ready) > 1:
        futures = {
            i: _pool(settings.num_threads).submit(solve_one, i, neighbor(i)) for i in ready
        }
        for i, fut in futures.items():
            vfs[i] = fut.result()
    else:
        for i in ready:
            vfs[i] = solve_one(i, neighbor(i))
    for i in deferred:
        vfs[i] = solve_one(i, vfs[i + 1])
    return vfs


def line_search(
    problem: SwitchedProblem,
    nominal_cost: float,
    vfs: Sequence[ValueFunction],
    nominal: Trajectory,
    settings: SolverSettings,
    t0: float,
    x0: np.ndarray,
    guarded: bool,
    compiled: bool = False,
):
    """Backtracking line search over the feedforward step scale.

    Accepts the largest candidate whose rollout cost strictly decreases
    and (in guarded/parallel mode) stays within the guard band of the
    value-function prediction for that step size,

        J_expected(a) = J_nominal - a (2 - a) (J_nominal - V(x0, t0)),

    which is exact on LQ problems (V predicts the full step, partial
    steps interpolate quadratically).  Falls back to the smallest
    candidate on a decrease-only test; raises StepRejected when nothing
    decreases.  Returns (alpha, policy, trajectory, cost,
    expected_cost, fallback, timings); fallback is True when the guard
    failed at every candidate and the decrease-only fallback was used.
    """
    value, _, _ = evaluate_value_function(vfs[0], x0, t0)
    guard = settings.line_search_guard
    span = (t0, float(vfs[-1].t_hi))
    t_forward = 0.0
    t_ctrl = 0.0
    tried = {}

    def expected_at(alpha):
        return nominal_cost - alpha * (2.0 - alpha) * (nominal_cost - value)

    for alpha in settings.line_search_alphas:
        tic = time.perf_counter()
        policy = update_controller(vfs, nominal, alpha, compiled)
        t_ctrl += time.perf_counter() - tic
        tic = time.perf_counter()
        try:
            traj = rollout(problem, policy, x0, span, settings.integrator, compiled)
            cost = evaluate_cost(problem, traj, compiled)
        except DivergentRollout:
            t_forward += time.perf_counter() - tic
            continue
        t_forward += time.perf_counter() - tic
        tried[alpha] = (policy, traj, cost)
        expected = expected_at(alpha)
        if cost < nominal_cost and (
            not guarded or abs(cost - expected) <= guard * max(1.0, abs(expected))
        ):
            return alpha, policy, traj, cost, expected, False, (t_forward, t_ctrl)
    alpha = settings.line_search_alphas[-1]
    if alpha in tried and tried[alpha][2] < nominal_cost:
        policy, traj, cost = tried[alpha]
        return alpha, policy, traj, cost, expected_at(alpha), True, (t_forward, t_ctrl)
    raise StepRejected(
        f"no line-search candidate decreased the cost (nominal {nominal_cost:.6g})"
    )


@dataclass
class IterationOutcome:
    policy: LinearFeedbackPolicy
    trajectory: Trajectory
    cost: float
    value_functions: list
    alpha: float
    expected_cost: float
    used_parallel: bool
    fallback: bool
    forward_s: float
    lq_s: float
    backward_s: float


def iterate_once(
    problem: SwitchedProblem,
    nominal: Trajectory,
    nominal_cost: float,
    settings: SolverSettings,
    prev_vfs: dict | None,
    t0: float,
    x0: np.ndarray,
    use_parallel: bool,
    compiled: bool,
    terminal_heuristic: TerminalQuadratic | None = None,
) -> IterationOutcome:
    """One full SLQ iteration from a rollout-consistent nominal.

    Raises StepRejected when the line search fails; the caller decides
    whether that means convergence (sequential) or a sequential retry
    (parallel).
    """
    tic = time.perf_counter()
    lq = build_lq_approximation(problem, nominal, settings.num_threads, compiled)
    lq_s = time.perf_counter() - tic

    tic = time.perf_counter()
    vfs = backward_pass(
        lq, prev_vfs, nominal, settings, compiled, terminal_heuristic, parallel=use_parallel
    )
    backward_s = time.perf_counter() - tic

    alpha, policy, traj, cost, expected, fallback, (forward_s, ctrl_s) = line_search(
        problem, nominal_cost, vfs, nominal, settings, t0, x0, guarded=use_parallel, compiled=compiled
    )
    return IterationOutcome(
        policy=policy,
        trajectory=traj,
        cost=cost,
        value_functions=vfs,
        alpha=alpha,
        expected_cost=expected,
        used_parallel=use_parallel,
        fallback=fallback,
        forward_s=forward_s,
        lq_s=lq_s,
        backward_s=backward_s + ctrl_s,
    )


def solve(
    problem: SwitchedProblem,
    initial_policy: LinearFeedbackPolicy | None = None,
    settings: SolverSettings | None = None,
    t_span: tuple | None = None,
    x0: np.ndarray | None = None,
    prev_value_functions: dict | None = None,
    terminal_heuristic: TerminalQuadratic | None = None,
) -> SolveResult:
    """Iterate SLQ to convergence (relative cost change below tolerance).

    The first iteration runs a sequential backward sweep unless warm-start
    value functions are supplied; a rejected parallel step falls back to
    one sequential iteration; a rejected sequential step means the
    nominal is a fixed point and the solve reports convergence.
    """
    settings = settings or SolverSettings()
    compiled = resolve_engine(settings.use_numba) and problem.kernels is not None
    span = t_span or (problem.schedule.t_start, problem.schedule.t_end)
    t0 = float(span[0])
    start = problem.x0 if x0 is None else np.asarray(x0, dtype=float)
    policy = initial_policy or zero_policy(problem, span)

    report = SolveReport(engine="numba" if compiled else "numpy")

    tic = time.perf_counter()
    nominal = rollout(problem, policy, start, span, settings.integrator, compiled)
    cost = evaluate_cost(problem, nominal, compiled)
    bootstrap_forward = time.perf_counter() - tic
    report.initial_cost = cost

    prev_vfs = dict(prev_value_functions) if prev_value_functions else None
    vfs_list: list = []
    force_sequential = prev_vfs is None
    converged = False

    for it in range(settings.max_iterations):
        use_parallel = settings.parallel_backward and not force_sequential and prev_vfs is not None
        try:
            outcome = iterate_once(
                problem,
                nominal,
                cost,
                settings,
                prev_vfs,
                t0,
                start,
                use_parallel,
                compiled,
                terminal_heuristic,
            )
        except StepRejected:
            report.step_rejections += 1
            report.iterations = it + 1
            report.costs.append(cost)
            report.alphas.append(0.0)
            report.expected_costs.append(math.nan)
            report.forward_s.append(bootstrap_forward)
            report.lq_s.append(0.0)
            report.backward_s.append(0.0)
            report.parallel_sweeps.append(use_parallel)
            bootstrap_forward = 0.0
            if use_parallel:
                force_sequential = True
                continue
            converged = True
            break

        policy = outcome.policy
        nominal = outcome.trajectory
        prev_cost = cost
        cost = outcome.cost
        vfs_list = outcome.value_functions
        prev_vfs = {vf.mode: vf for vf in vfs_list}
        force_sequential = False

        report.iterations = it + 1
        report.costs.append(cost)
        report.alphas.append(outcome.alpha)
        report.expected_costs.append(outcome.expected_cost)
        report.forward_s.append(outcome.forward_s + bootstrap_forward)
        report.lq_s.append(outcome.lq_s)
        report.backward_s.append(outcome.backward_s)
        report.parallel_sweeps.append(outcome.used_parallel)
        bootstrap_forward = 0.0

        if abs(cost - prev_cost) <= settings.convergence_tol * max(1.0, abs(prev_cost)):
            converged = True
            break

    report.converged = converged
    return SolveResult(policy=policy, value_functions=vfs_list, trajectory=nominal, report=report, cost=cost)
