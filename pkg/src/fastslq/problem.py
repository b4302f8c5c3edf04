"""Switched optimal-control problem definitions.

A problem is a fixed sequence of modes (subsystems active between
consecutive switching times), per-subsystem dynamics, equality and
inequality constraints, quadratic-friendly stage costs, and an optional
overall terminal cost.  The state is continuous across switches by
construction; there are no jump maps.

Built-in models additionally attach a :class:`KernelPack` of
numba-compatible family kernels so the solver's hot loops can run
compiled; problems built from plain Python callables run the same
algorithms on the interpreted path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._jit import JitKernel
from .errors import DimensionMismatch, NonFiniteCost, OutOfHorizon

Array = np.ndarray

_HORIZON_SLACK = 1e-9


@dataclass(frozen=True)
class ModeSchedule:
    """Switching times t0 < t1 < ... < tI and the subsystem of each mode.

    Mode ``i`` is active on the half-open interval [t_i, t_{i+1}); the
    final time t_I belongs to the last mode by convention.
    """

    switching_times: tuple
    subsystem_ids: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.switching_times)
        ids = tuple(int(i) for i in self.subsystem_ids)
        if len(times) < 2:
            raise ValueError("schedule needs at least one mode (two times)")
        if len(ids) != len(times) - 1:
            raise ValueError("need exactly one subsystem id per interval")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("switching times must be strictly increasing")
        if any(i < 0 for i in ids):
            raise ValueError("subsystem ids must be nonnegative")
        object.__setattr__(self, "switching_times", times)
        object.__setattr__(self, "subsystem_ids", ids)

    @property
    def num_modes(self) -> int:
        return len(self.subsystem_ids)

    @property
    def t_start(self) -> float:
        return self.switching_times[0]

    @property
    def t_end(self) -> float:
        return self.switching_times[-1]

    def mode_span(self, i: int) -> tuple:
        return self.switching_times[i], self.switching_times[i + 1]

    def times_array(self) -> Array:
        return np.asarray(self.switching_times)


def mode_at(schedule: ModeSchedule, t: float) -> int:
    """Mode index active at time ``t`` (half-open intervals).

    Returns i with t_i <= t < t_{i+1}; the right endpoint t_I maps to the
    last mode.  Raises :class:`OutOfHorizon` outside [t0, t_I] beyond a
    1e-9 slack.
    """
    times = schedule.switching_times
    if t < times[0] - _HORIZON_SLACK or t > times[-1] + _HORIZON_SLACK:
        raise OutOfHorizon(f"t={t!r} outside horizon [{times[0]}, {times[-1]}]")
    k = int(np.searchsorted(np.asarray(times), t, side="right")) - 1
    if k < 0:
        return 0
    if k >= len(times) - 1:
        return len(times) - 2
    return k


@dataclass(frozen=True)
class GaitPattern:
    """Cyclic mode pattern: subsystem ids with phase durations, repeating.

    Position ``k`` in the unrolled gait maps to pattern entry ``k % len``;
    the pattern itself never ends, schedules are finite windows of it.
    """

    subsystem_ids: tuple
    durations: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.subsystem_ids)
        durs = tuple(float(d) for d in self.durations)
        if not ids or len(ids) != len(durs):
            raise ValueError("gait needs matching nonempty ids and durations")
        if any(d <= 0.0 for d in durs):
            raise ValueError("gait phase durations must be positive")
        if any(i < 0 for i in ids):
            raise ValueError("gait subsystem ids must be nonnegative")
        object.__setattr__(self, "subsystem_ids", ids)
        object.__setattr__(self, "durations", durs)

    @property
    def cycle_duration(self) -> float:
        return float(sum(self.durations))

    def id_at_position(self, k: int) -> int:
        return self.subsystem_ids[k % len(self.subsystem_ids)]

    def duration_at_position(self, k: int) -> float:
        return self.durations[k % len(self.durations)]

    def unroll(self, t0: float, num_modes: int, start_position: int = 0) -> ModeSchedule:
        """Finite schedule of ``num_modes`` gait phases starting at ``t0``."""
        if num_modes < 1:
            raise ValueError("num_modes must be >= 1")
        times = [float(t0)]
        ids = []
        for k in range(start_position, start_position + num_modes):
            ids.append(self.id_at_position(k))
            times.append(times[-1] + self.duration_at_position(k))
        return ModeSchedule(tuple(times), tuple(ids))


@dataclass
class SubsystemModel:
    """Dynamics and constraints of one subsystem.

    Callables use the signature conventions:

    * ``dynamics(x, u, t) -> xdot``
    * ``state_input_constraints(x, u, t) -> residual`` (== 0 feasible)
    * ``state_only_constraints(x, t) -> residual`` (== 0 feasible)
    * ``inequality_constraints(x, u, t) -> residual`` (>= 0 feasible)

    Analytic Jacobians are optional; missing ones fall back to central
    finite differences in the LQ builder.  Declared row counts let
    downstream code size arrays without probing the callables.
    """

    dynamics: Callable
    dynamics_jacobians: Callable | None = None
    state_input_constraints: Callable | None = None
    state_input_constraint_jacobians: Callable | None = None
    state_only_constraints: Callable | None = None
    state_only_constraint_jacobian: Callable | None = None
    inequality_constraints: Callable | None = None
    inequality_jacobians: Callable | None = None
    num_eq_state_input: int = 0
    num_eq_state: int = 0
    num_ineq: int = 0
    name: str = ""


@dataclass
class TerminalCost:
    """Scalar terminal cost with optional analytic (gradient, Hessian)."""

    value: Callable
    derivatives: Callable | None = None


@dataclass
class StageCost:
    """Intermediate cost of one subsystem plus optional mode-end terminal.

    ``intermediate(x, u, t)`` returns a scalar;
    ``intermediate_derivatives(x, u, t)`` (optional) returns the exact
    expansion blocks ``(q_x, q_u, Q, R, P)`` with P the d2L/dxdu block.
    The per-mode terminal applies at the mode's end boundary and defaults
    to zero; built-in problems put their goal term in the problem-level
    terminal instead.
    """

    intermediate: Callable
    intermediate_derivatives: Callable | None = None
    terminal: TerminalCost | None = None


@dataclass(frozen=True)
class KernelPack:
    """Family kernels letting built-in models run the compiled engine.

    All kernels consume a per-mode parameter tuple from ``mode_params``
    (indexed by mode position, not subsystem id):

    * ``rollout_rhs(t, y, (params, (ptimes, puff, pgain))) -> ydot``
      closed-loop dynamics under the interpolated affine policy,
      inequality projection included;
    * ``input_batch(times, states, (params, policy)) -> inputs``
      the same projected policy inputs evaluated at given states;
    * ``lq_fill(times, states, inputs, params) ->
      (A, B, C, D, e, F, h, P, Q, q, r, R, stage)`` stacked LQ data;
    * ``stage_cost_batch(times, states, inputs, params) -> costs``.
    """

    rollout_rhs: JitKernel
    input_batch: JitKernel
    lq_fill: JitKernel
    stage_cost_batch: JitKernel
    mode_params: tuple


@dataclass(frozen=True)
class SwitchedProblem:
    """A complete switched optimal-control problem instance.

    ``costs`` is indexed by subsystem id (gaits reuse one cost per
    subsystem); the optional ``terminal_cost`` applies once at the final
    time.  ``rebuild``, when provided by a model builder, constructs the
    same problem over a different schedule and is what the MPC loop uses
    to append gait modes.  Instances are treated as immutable and are
    safe to share across threads.
    """

    schedule: ModeSchedule
    subsystems: tuple
    costs: tuple
    x0: Array
    state_dim: int
    input_dim: int
    terminal_cost: TerminalCost | None = None
    kernels: KernelPack | None = None
    rebuild: Callable | None = None
    state_names: tuple | None = None
    input_names: tuple | None = None
    name: str = ""

    def __post_init__(self):
        x0 = np.ascontiguousarray(self.x0, dtype=float)
        if x0.shape != (self.state_dim,):
            raise DimensionMismatch(f"x0 shape {x0.shape} != ({self.state_dim},)")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "subsystems", tuple(self.subsystems))
        object.__setattr__(self, "costs", tuple(self.costs))
        for sid in self.schedule.subsystem_ids:
            if sid >= len(self.subsystems):
                raise DimensionMismatch(f"subsystem id {sid} out of range")
        if len(self.costs) != len(self.subsystems):
            raise DimensionMismatch("need one StageCost per subsystem")
        for sub in self.subsystems:
            if sub.num_eq_state_input > self.input_dim:
                raise DimensionMismatch(
                    f"subsystem {sub.name!r}: {sub.num_eq_state_input} state-input "
                    f"equality rows exceed input dimension {self.input_dim}"
                )
        if self.kernels is not None and len(self.kernels.mode_params) != self.schedule.num_modes:
            raise DimensionMismatch("kernel mode_params must match mode count")

    def subsystem_at(self, t: float) -> SubsystemModel:
        return self.subsystems[self.schedule.subsystem_ids[mode_at(self.schedule, t)]]

    def cost_of_mode(self, i: int) -> StageCost:
        return self.costs[self.schedule.subsystem_ids[i]]


@dataclass(frozen=True)
class TrajectorySegment:
    """One mode's slice of a rollout: integrator nodes plus midpoints.

    ``mid_states`` are Hermite-interpolated states at step midpoints and
    ``mid_inputs`` the policy inputs there; externally built segments may
    pass empty (0, m) arrays, in which case input interpolation degrades
    to linear and the cost quadrature to the trapezoid rule.
    """

    mode: int
    times: Array
    states: Array
    derivs: Array
    inputs: Array
    mid_states: Array
    mid_inputs: Array


class Trajectory:
    """Piecewise trajectory over the horizon: one segment per mode.

    States are continuous across segment boundaries (validated to 1e-9);
    inputs may jump there.  Between nodes, states interpolate with cubic
    Hermite polynomials and inputs quadratically through the stored
    midpoint samples (linearly when midpoints are absent).
    """

    def __init__(self, segments: Sequence[TrajectorySegment]):
        if not segments:
            raise ValueError("trajectory needs at least one segment")
        for seg in segments:
            if seg.times.ndim != 1 or seg.times.size < 2:
                raise ValueError("each segment needs at least two nodes")
            if np.any(np.diff(seg.times) <= 0.0):
                raise ValueError("segment times must be strictly increasing")
        for a, b in zip(segments, segments[1:]):
            gap = float(np.max(np.abs(a.states[-1] - b.states[0])))
            if gap > 1e-9:
                raise ValueError(f"state jump {gap:.3e} at segment boundary")
        self._segments = tuple(segments)
        self._starts = np.array([seg.times[0] for seg in self._segments])

    @property
    def segments(self) -> tuple:
        return self._segments

    @property
    def t_start(self) -> float:
        return float(self._segments[0].times[0])

    @property
    def t_end(self) -> float:
        return float(self._segments[-1].times[-1])

    @property
    def node_count(self) -> int:
        return sum(seg.times.size for seg in self._segments)

    def segment_index_at(self, t: float) -> int:
        k = int(np.searchsorted(self._starts, t, side="right")) - 1
        return min(max(k, 0), len(self._segments) - 1)

    def segment_at(self, t: float) -> TrajectorySegment:
        return self._segments[self.segment_index_at(t)]

    def state_at(self, t: float) -> Array:
        seg = self.segment_at(t)
        tc = min(max(float(t), float(seg.times[0])), float(seg.times[-1]))
        from . import _kernels

        return _kernels.hermite_point.py_func(seg.times, seg.states, seg.derivs, tc)

    def input_at(self, t: float) -> Array:
        seg = self.segment_at(t)
        tc = min(max(float(t), float(seg.times[0])), float(seg.times[-1]))
        times = seg.times
        j = int(np.searchsorted(times, tc, side="right")) - 1
        j = min(max(j, 0), times.size - 2)
        h = times[j + 1] - times[j]
        w = 0.0 if h <= 0.0 else (tc - times[j]) / h
        if seg.mid_inputs.shape[0] == times.size - 1:
            b0 = (2.0 * w - 1.0) * (w - 1.0)
            bm = 4.0 * w * (1.0 - w)
            b1 = w * (2.0 * w - 1.0)
            return b0 * seg.inputs[j] + bm * seg.mid_inputs[j] + b1 * seg.inputs[j + 1]
        return (1.0 - w) * seg.inputs[j] + w * seg.inputs[j + 1]

    def final_state(self) -> Array:
        return self._segments[-1].states[-1].copy()

    def stacked(self) -> tuple:
        """(times, states, inputs) over all nodes, boundaries duplicated."""
        times = np.concatenate([seg.times for seg in self._segments])
        states = np.vstack([seg.states for seg in self._segments])
        inputs = np.vstack([seg.inputs for seg in self._segments])
        return times, states, inputs


def evaluate_constraints(problem: SwitchedProblem, x, u, t: float) -> tuple:
    """Constraint residuals (g1, g2, h) of the subsystem active at ``t``.

    Missing constraint callables yield empty vectors.  Residual lengths
    are validated against the declared counts.
    """
    sub = problem.subsystem_at(t)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def _run(fn, args, count, label):
        if fn is None:
            return np.zeros(0)
        out = np.atleast_1d(np.asarray(fn(*args), dtype=float))
        if out.shape != (count,):
            raise DimensionMismatch(
                f"{label} returned shape {out.shape}, declared ({count},)"
            )
        return out

    g1 = _run(sub.state_input_constraints, (x, u, t), sub.num_eq_state_input, "g1")
    g2 = _run(sub.state_only_constraints, (x, t), sub.num_eq_state, "g2")
    hv = _run(sub.inequality_constraints, (x, u, t), sub.num_ineq, "h")
    return g1, g2, hv


def _segment_stage_costs(problem: SwitchedProblem, seg: TrajectorySegment, compiled: bool):
    """Stage cost at segment nodes and midpoints as two arrays."""
    if problem.kernels is not None:
        fn = problem.kernels.stage_cost_batch.get(compiled)
        params = problem.kernels.mode_params[seg.mode]
        at_nodes = fn(seg.times, seg.states, seg.inputs, params)
        mid_times = 0.5 * (seg.times[:-1] + seg.times[1:])
        at_mids = fn(mid_times, seg.mid_states, seg.mid_inputs, params)
        return at_nodes, at_mids
    cost = problem.cost_of_mode(seg.mode)
    at_nodes = np.array(
        [cost.intermediate(seg.states[k], seg.inputs[k], seg.times[k]) for k in range(seg.times.size)]
    )
    if seg.mid_states.shape[0] == seg.times.size - 1:
        mid_times = 0.5 * (seg.times[:-1] + seg.times[1:])
        at_mids = np.array(
            [
                cost.intermediate(seg.mid_states[k], seg.mid_inputs[k], mid_times[k])
                for k in range(mid_times.size)
            ]
        )
    else:
        at_mids = 0.5 * (at_nodes[:-1] + at_nodes[1:])
    return at_nodes, at_mids


def evaluate_cost(problem: SwitchedProblem, traj: Trajectory, compiled: bool | None = None) -> float:
    """Total cost of a trajectory: mode integrals plus terminal terms.

    The running integral uses per-step Simpson quadrature on each
    segment's own node grid (the rollout's adaptive nodes), consuming the
    trajectory's stored midpoint samples, so the quadrature order matches
    the interpolation order.  Additive over modes by construction.
    """
    from ._jit import resolve_engine

    use = resolve_engine(compiled) and problem.kernels is not None
    total = 0.0
    for seg in problem_segments(problem, traj):
        nodes, mids = _segment_stage_costs(problem, seg, use)
        hsteps = np.diff(seg.times)
        total += float(np.sum(hsteps / 6.0 * (nodes[:-1] + 4.0 * mids + nodes[1:])))
        cost = problem.cost_of_mode(seg.mode)
        if cost.terminal is not None:
            total += float(cost.terminal.value(seg.states[-1]))
    if problem.terminal_cost is not None:
        total += float(problem.terminal_cost.value(traj.final_state()))
    if not np.isfinite(total):
        raise NonFiniteCost(f"trajectory cost evaluated to {total!r}")
    return total


def problem_segments(problem: SwitchedProblem, traj: Trajectory) -> tuple:
    """The trajectory's segments, sanity-checked against the schedule."""
    for seg in traj.segments:
        if seg.mode >= problem.schedule.num_modes:
            raise DimensionMismatch(
                f"segment mode {seg.mode} outside schedule with {problem.schedule.num_modes} modes"
            )
    return traj.segments
