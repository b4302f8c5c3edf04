"""Built-in problems: switched LTI benchmarks and a planar legged model.

Each model family ships four family kernels (closed-loop rollout right
hand side, batch policy-input evaluation, batch LQ fill, batch stage
cost) plus plain Python callables with analytic Jacobians for the same
math.  The kernels are module-level and parameterized by per-mode data
tuples, so the integrator core specializes once per family rather than
once per problem instance.

Per-mode parameter tuples end with ``(x_ref, u_ref)`` in both families;
:func:`reference_input_policy` relies on that convention.

The planar legged model is a 2D analog of a trotting quadruped: CoM
translation, body pitch driven by contact-force moment arms, two feet
with commanded velocities, and first-order velocity-filter states.  Mode
structure: full stance (both feet loaded) or one foot swinging along a
quintic height profile while the other carries the weight.  Stance feet
obey a friction cone handled by projection during rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._jit import kernel
from .errors import DimensionMismatch, OutOfSpan
from .problem import (
    GaitPattern,
    KernelPack,
    ModeSchedule,
    StageCost,
    SubsystemModel,
    SwitchedProblem,
    TerminalCost,
)
from .lq import regularize_cost_blocks
from .solver import LinearFeedbackPolicy, PolicySegment


# ---------------------------------------------------------------------------
# Switched LTI family
# ---------------------------------------------------------------------------
# Per-mode params: (A, B, c0, C, D, e0, Q, R, x_ref, u_ref).


@kernel(nogil=True)
def lti_rollout_rhs(t, y, p):
    """Closed-loop xdot = A x + B u + c0 under the interpolated policy."""
    mp, pol = p
    A = mp[0]
    B = mp[1]
    c0 = mp[2]
    ptimes, puff, pgain = pol
    k = np.searchsorted(ptimes, t)
    if k <= 0:
        j = 0
    elif k >= ptimes.shape[0]:
        j = ptimes.shape[0] - 2
    else:
        j = k - 1
    dt = ptimes[j + 1] - ptimes[j]
    w = 0.0 if dt <= 0.0 else (t - ptimes[j]) / dt
    if w < 0.0:
        w = 0.0
    elif w > 1.0:
        w = 1.0
    uff = (1.0 - w) * puff[j] + w * puff[j + 1]
    gain = (1.0 - w) * pgain[j] + w * pgain[j + 1]
    u = uff + gain @ y
    return A @ y + B @ u + c0


@kernel(nogil=True)
def lti_input_batch(times, states, p):
    """Policy inputs at given (time, state) rows."""
    mp, pol = p
    ptimes, puff, pgain = pol
    K = times.shape[0]
    m = puff.shape[1]
    out = np.empty((K, m))
    for i in range(K):
        t = times[i]
        k = np.searchsorted(ptimes, t)
        if k <= 0:
            j = 0
        elif k >= ptimes.shape[0]:
            j = ptimes.shape[0] - 2
        else:
            j = k - 1
        dt = ptimes[j + 1] - ptimes[j]
        w = 0.0 if dt <= 0.0 else (t - ptimes[j]) / dt
        if w < 0.0:
            w = 0.0
        elif w > 1.0:
            w = 1.0
        uff = (1.0 - w) * puff[j] + w * puff[j + 1]
        gain = (1.0 - w) * pgain[j] + w * pgain[j + 1]
        out[i] = uff + gain @ states[i]
    return out


@kernel(nogil=True)
def lti_lq_fill(times, states, inputs, mp):
    """Stacked LQ data along the nodes; exact for an LTI mode."""
    A0 = mp[0]
    B0 = mp[1]
    C0 = mp[3]
    D0 = mp[4]
    e0 = mp[5]
    Qm = mp[6]
    Rm = mp[7]
    xref = mp[8]
    uref = mp[9]
    K = times.shape[0]
    n = A0.shape[0]
    m = B0.shape[1]
    c1 = C0.shape[0]
    A = np.empty((K, n, n))
    B = np.empty((K, n, m))
    C = np.empty((K, c1, n))
    D = np.empty((K, c1, m))
    e = np.empty((K, c1))
    F = np.zeros((K, 0, n))
    h = np.zeros((K, 0))
    P = np.zeros((K, n, m))
    Q = np.empty((K, n, n))
    qv = np.empty((K, n))
    r = np.empty((K, m))
    R = np.empty((K, m, m))
    stage = np.empty(K)
    for k in range(K):
        A[k] = A0
        B[k] = B0
        Q[k] = Qm
        R[k] = Rm
        dx = states[k] - xref
        du = inputs[k] - uref
        qv[k] = Qm @ dx
        r[k] = Rm @ du
        stage[k] = 0.5 * (dx @ (Qm @ dx)) + 0.5 * (du @ (Rm @ du))
        if c1 > 0:
            C[k] = C0
            D[k] = D0
            e[k] = C0 @ states[k] + D0 @ inputs[k] + e0
    return A, B, C, D, e, F, h, P, Q, qv, r, R, stage


@kernel(nogil=True)
def lti_stage_cost_batch(times, states, inputs, mp):
    Qm = mp[6]
    Rm = mp[7]
    xref = mp[8]
    uref = mp[9]
    K = times.shape[0]
    out = np.empty(K)
    for k in range(K):
        dx = states[k] - xref
        du = inputs[k] - uref
        out[k] = 0.5 * (dx @ (Qm @ dx)) + 0.5 * (du @ (Rm @ du))
    return out


def _as_matrix(a, shape, label):
    a = np.ascontiguousarray(a, dtype=float)
    if a.shape != shape:
        raise DimensionMismatch(f"{label} shape {a.shape} != {shape}")
    return a


def make_lti_problem(
    A,
    B,
    Q,
    R,
    Q_f,
    x0,
    schedule: ModeSchedule,
    constraints=None,
    c0=None,
    x_ref=None,
    u_ref=None,
    name: str = "lti",
) -> SwitchedProblem:
    """Switched problem with identical LTI dynamics in every mode.

    ``constraints`` is an optional sequence, one entry per SUBSYSTEM id,
    each either None or a tuple (C, D, e) defining the affine equality
    C x + D u + e = 0 active whenever that subsystem runs.  Stage cost is
    0.5 (x - x_ref)' Q (x - x_ref) + 0.5 (u - u_ref)' R (u - u_ref) with
    terminal 0.5 (x - x_ref)' Q_f (x - x_ref).  Cost blocks are
    regularized once here, so the LQ builder sees them as-is.
    """
    A = np.ascontiguousarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    n = A.shape[0]
    B = np.ascontiguousarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != n:
        raise DimensionMismatch(f"B shape {B.shape} incompatible with A {A.shape}")
    m = B.shape[1]
    Q = _as_matrix(Q, (n, n), "Q")
    R = _as_matrix(R, (m, m), "R")
    Q_f = _as_matrix(Q_f, (n, n), "Q_f")
    x0 = _as_matrix(x0, (n,), "x0")
    c0 = np.zeros(n) if c0 is None else _as_matrix(c0, (n,), "c0")
    x_ref = np.zeros(n) if x_ref is None else _as_matrix(x_ref, (n,), "x_ref")
    u_ref = np.zeros(m) if u_ref is None else _as_matrix(u_ref, (m,), "u_ref")

    Q, R, _ = regularize_cost_blocks(Q, R, np.zeros((n, m)))
    Q_f = 0.5 * (Q_f + Q_f.T)

    num_subsystems = max(schedule.subsystem_ids) + 1
    if constraints is None:
        constraints = [None] * num_subsystems
    constraints = list(constraints)
    if len(constraints) != num_subsystems:
        raise DimensionMismatch(
            f"need one constraint entry per subsystem ({num_subsystems}), got {len(constraints)}"
        )

    def dynamics(x, u, t):
        return A @ x + B @ u + c0

    def dynamics_jacobians(x, u, t):
        return A, B

    def stage_value(x, u, t):
        dx = x - x_ref
        du = u - u_ref
        return 0.5 * float(dx @ (Q @ dx)) + 0.5 * float(du @ (R @ du))

    def stage_derivs(x, u, t):
        dx = x - x_ref
        du = u - u_ref
        return Q @ dx, R @ du, Q, R, np.zeros((n, m))

    def terminal_value(x):
        dx = x - x_ref
        return 0.5 * float(dx @ (Q_f @ dx))

    def terminal_derivs(x):
        dx = x - x_ref
        return Q_f @ dx, Q_f

    subsystems = []
    packed_constraints = []
    for sid in range(num_subsystems):
        entry = constraints[sid]
        if entry is None:
            Cc = np.zeros((0, n))
            Dc = np.zeros((0, m))
            ec = np.zeros(0)
        else:
            Cc, Dc, ec = entry
            Cc = np.ascontiguousarray(Cc, dtype=float)
            Dc = np.ascontiguousarray(Dc, dtype=float)
            ec = np.ascontiguousarray(ec, dtype=float)
            if Cc.ndim != 2 or Cc.shape[1] != n or Dc.shape != (Cc.shape[0], m) or ec.shape != (Cc.shape[0],):
                raise DimensionMismatch(f"constraint blocks of subsystem {sid} inconsistent")
        packed_constraints.append((Cc, Dc, ec))
        c1 = Cc.shape[0]
        if c1 > 0:

            def g1(x, u, t, _C=Cc, _D=Dc, _e=ec):
                return _C @ x + _D @ u + _e

            def g1_jac(x, u, t, _C=Cc, _D=Dc):
                return _C, _D

        else:
            g1 = None
            g1_jac = None
        subsystems.append(
            SubsystemModel(
                dynamics=dynamics,
                dynamics_jacobians=dynamics_jacobians,
                state_input_constraints=g1,
                state_input_constraint_jacobians=g1_jac,
                num_eq_state_input=c1,
                name=f"{name}-sub{sid}",
            )
        )

    costs = tuple(StageCost(stage_value, stage_derivs) for _ in range(num_subsystems))

    mode_params = tuple(
        (A, B, c0) + packed_constraints[schedule.subsystem_ids[i]] + (Q, R, x_ref, u_ref)
        for i in range(schedule.num_modes)
    )
    kernels = KernelPack(
        rollout_rhs=lti_rollout_rhs,
        input_batch=lti_input_batch,
        lq_fill=lti_lq_fill,
        stage_cost_batch=lti_stage_cost_batch,
        mode_params=mode_params,
    )

    def rebuild(new_schedule: ModeSchedule) -> SwitchedProblem:
        return make_lti_problem(
            A, B, Q, R, Q_f, x0, new_schedule,
            constraints=constraints, c0=c0, x_ref=x_ref, u_ref=u_ref, name=name,
        )

    return SwitchedProblem(
        schedule=schedule,
        subsystems=tuple(subsystems),
        costs=costs,
        x0=x0,
        state_dim=n,
        input_dim=m,
        terminal_cost=TerminalCost(terminal_value, terminal_derivs),
        kernels=kernels,
        rebuild=rebuild,
        name=name,
    )


# ---------------------------------------------------------------------------
# Planar legged model
# ---------------------------------------------------------------------------

PLANAR_STATE_DIM = 14
PLANAR_INPUT_DIM = 8

PLANAR_STATE_NAMES = (
    "com_x", "com_z", "com_vx", "com_vz", "pitch", "pitch_rate",
    "foot0_x", "foot0_z", "foot1_x", "foot1_z",
    "filt0_vx", "filt0_vz", "filt1_vx", "filt1_vz",
)
PLANAR_INPUT_NAMES = (
    "force0_x", "force0_z", "force1_x", "force1_z",
    "footvel0_x", "footvel0_z", "footvel1_x", "footvel1_z",
)

# Subsystem ids of the trot vocabulary.
FULL_STANCE = 0
SWING_FOOT_0 = 1
SWING_FOOT_1 = 2

_STANCE_FLAGS = {
    FULL_STANCE: (1.0, 1.0),
    SWING_FOOT_0: (0.0, 1.0),
    SWING_FOOT_1: (1.0, 0.0),
}


@dataclass(frozen=True)
class PlanarLeggedModel:
    """Physical parameters of the planar two-foot hopper analog.

    State (14): CoM position and velocity, pitch and pitch rate, two
    foot positions, and four first-order foot-velocity filter states.
    Input (8): per-foot contact force (x, z) then per-foot commanded
    foot velocity (x, z).  Pitch is driven by the force moment arms
    about the CoM; foot positions integrate the commanded velocities.

    Each planar foot aggregates one diagonal leg pair of a quadruped
    seen from the side, so its support point sits close to the CoM
    axis.  Keep ``foot_spread`` small; a wide spread turns single
    stance into a fall-and-catch cycle that saturates the friction
    cone.
    """

    mass: float = 30.0
    gravity: float = 9.81
    friction_coeff: float = 0.7
    inertia: float = 1.8
    com_height: float = 0.5
    foot_spread: float = 0.05
    velocity_filter_tau: float = 0.1

    def __post_init__(self):
        if self.mass <= 0.0 or self.friction_coeff <= 0.0:
            raise ValueError("mass and friction coefficient must be positive")
        if self.inertia <= 0.0 or self.com_height <= 0.0:
            raise ValueError("inertia and CoM height must be positive")
        if self.velocity_filter_tau <= 0.0:
            raise ValueError("velocity filter time constant must be positive")

    def nominal_state(self, x_offset: float = 0.0) -> np.ndarray:
        """Standing state: CoM above the foot midpoint, feet spread."""
        x = np.zeros(PLANAR_STATE_DIM)
        x[0] = x_offset
        x[1] = self.com_height
        x[6] = x_offset - self.foot_spread
        x[8] = x_offset + self.foot_spread
        return x

    def consts_array(self) -> np.ndarray:
        return np.array(
            [self.mass, self.gravity, self.inertia, self.friction_coeff, self.velocity_filter_tau]
        )


@dataclass(frozen=True)
class SwingProfile:
    """Quintic swing-height profile in normalized phase.

    Boundary conditions: zero height and zero vertical velocity at both
    lift-off and touch-down, apex height with zero velocity at mid
    phase.  Touch-down velocity is zero by construction, so contact
    happens exactly at the scheduled switching time without impact.
    """

    lift_off: float
    touch_down: float
    apex_height: float

    def __post_init__(self):
        if self.touch_down <= self.lift_off:
            raise ValueError("touch-down must come after lift-off")
        if self.apex_height <= 0.0:
            raise ValueError("apex height must be positive")

    @property
    def duration(self) -> float:
        return self.touch_down - self.lift_off

    def coefficients(self) -> np.ndarray:
        """Quintic coefficients a_i of c(s) = sum a_i s^i, s in [0, 1]."""
        rows = np.zeros((6, 6))
        rhs = np.zeros(6)
        powers = np.arange(6.0)
        rows[0, 0] = 1.0                       # c(0) = 0
        rows[1, 1] = 1.0                       # c'(0) = 0
        rows[2] = 1.0                          # c(1) = 0
        rows[3] = powers                       # c'(1) = 0
        rows[4] = 0.5 ** powers                # c(1/2) = apex
        rows[5] = powers * 0.5 ** np.maximum(powers - 1.0, 0.0)  # c'(1/2) = 0
        rhs[4] = self.apex_height
        return np.linalg.solve(rows, rhs)


def swing_c(profile: SwingProfile, t: float) -> tuple:
    """(height, vertical velocity) of the swing profile at time ``t``."""
    if t < profile.lift_off - 1e-9 or t > profile.touch_down + 1e-9:
        raise OutOfSpan(
            f"t={t!r} outside swing span [{profile.lift_off}, {profile.touch_down}]"
        )
    T = profile.duration
    s = min(max((t - profile.lift_off) / T, 0.0), 1.0)
    coef = profile.coefficients()
    height = 0.0
    vel = 0.0
    for i in range(5, -1, -1):
        height = height * s + coef[i]
    for i in range(5, 0, -1):
        vel = vel * s + i * coef[i]
    return float(height), float(vel / T)


def _poly_cdot(coef: np.ndarray, lo: float, hi: float, t: float) -> float:
    """d/dt of the swing height polynomial over the span [lo, hi]."""
    T = hi - lo
    s = min(max((t - lo) / T, 0.0), 1.0)
    vel = 0.0
    for i in range(5, 0, -1):
        vel = vel * s + i * coef[i]
    return vel / T


def trot_gait(phase_duration: float = 0.4) -> GaitPattern:
    """Alternating single-foot swings, one gait cycle per two phases."""
    return GaitPattern((SWING_FOOT_0, SWING_FOOT_1), (phase_duration, phase_duration))


@dataclass(frozen=True)
class TrotTask:
    """Task selector for the planar trot problem.

    ``regulation`` holds the nominal stance in place; ``goto`` shifts
    every positional reference to ``x_goal``.  ``stride`` is the maximum
    reference advance per gait cycle used by harness-level reference
    scheduling for long moves, not by the problem itself.
    """

    kind: str = "regulation"
    x_goal: float = 0.0
    stride: float = 0.35

    def __post_init__(self):
        if self.kind not in ("regulation", "goto"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.stride <= 0.0:
            raise ValueError("stride must be positive")

    def reference_offset(self) -> float:
        return self.x_goal if self.kind == "goto" else 0.0


@dataclass(frozen=True)
class TrotWeights:
    """Diagonal cost weights of the planar trot problem.

    Swing-foot entries replace the stance-foot entries for whichever
    foot is in the air, freeing it to track the height profile and to
    place itself; velocity-filter states get a token weight only.
    """

    com_position: tuple = (60.0, 300.0)
    com_velocity: tuple = (15.0, 30.0)
    pitch: float = 300.0
    pitch_rate: float = 15.0
    stance_foot: tuple = (30.0, 60.0)
    swing_foot: tuple = (2.0, 0.0)
    filter_state: float = 1e-3
    force: tuple = (2e-3, 1e-3)
    foot_velocity: tuple = (2e-2, 2e-2)
    terminal_scale: float = 10.0

    def state_diagonal(self, flags: tuple) -> np.ndarray:
        d = np.empty(PLANAR_STATE_DIM)
        d[0], d[1] = self.com_position
        d[2], d[3] = self.com_velocity
        d[4] = self.pitch
        d[5] = self.pitch_rate
        for foot in range(2):
            w = self.stance_foot if flags[foot] > 0.5 else self.swing_foot
            d[6 + 2 * foot] = w[0]
            d[7 + 2 * foot] = w[1]
        d[10:14] = self.filter_state
        return d

    def input_diagonal(self) -> np.ndarray:
        d = np.empty(PLANAR_INPUT_DIM)
        d[0] = d[2] = self.force[0]
        d[1] = d[3] = self.force[1]
        d[4] = d[6] = self.foot_velocity[0]
        d[5] = d[7] = self.foot_velocity[1]
        return d

    def terminal_diagonal(self) -> np.ndarray:
        return self.terminal_scale * self.state_diagonal((1.0, 1.0))


@kernel(nogil=True)
def planar_rollout_rhs(t, y, p):
    """Closed-loop planar dynamics under mode-consistent projected inputs.

    The affine policy input is clamped onto the active mode's feasible
    input set before entering the dynamics: stance forces project onto
    the friction cone and stance foot-velocity commands vanish, while a
    swing foot carries no force and its vertical velocity command tracks
    the height profile exactly.
    """
    mp, pol = p
    flags = mp[0]
    cpoly = mp[1]
    tspan = mp[2]
    consts = mp[5]
    mass = consts[0]
    grav = consts[1]
    inertia = consts[2]
    mu = consts[3]
    tau = consts[4]
    ptimes, puff, pgain = pol
    k = np.searchsorted(ptimes, t)
    if k <= 0:
        j = 0
    elif k >= ptimes.shape[0]:
        j = ptimes.shape[0] - 2
    else:
        j = k - 1
    dt = ptimes[j + 1] - ptimes[j]
    w = 0.0 if dt <= 0.0 else (t - ptimes[j]) / dt
    if w < 0.0:
        w = 0.0
    elif w > 1.0:
        w = 1.0
    uff = (1.0 - w) * puff[j] + w * puff[j + 1]
    gain = (1.0 - w) * pgain[j] + w * pgain[j + 1]
    u = uff + gain @ y
    T = tspan[1] - tspan[0]
    for foot in range(2):
        if flags[foot] > 0.5:
            lx = u[2 * foot]
            lz = u[2 * foot + 1]
            if not (lz >= 0.0 and abs(lx) <= mu * lz):
                if lz <= -mu * abs(lx):
                    u[2 * foot] = 0.0
                    u[2 * foot + 1] = 0.0
                else:
                    sgn = 1.0 if lx >= 0.0 else -1.0
                    edge = (sgn * mu * lx + lz) / (1.0 + mu * mu)
                    u[2 * foot] = edge * sgn * mu
                    u[2 * foot + 1] = edge
            u[4 + 2 * foot] = 0.0
            u[5 + 2 * foot] = 0.0
        else:
            u[2 * foot] = 0.0
            u[2 * foot + 1] = 0.0
            s = (t - tspan[0]) / T
            if s < 0.0:
                s = 0.0
            elif s > 1.0:
                s = 1.0
            cdot = 0.0
            for i in range(5, 0, -1):
                cdot = cdot * s + i * cpoly[i]
            u[5 + 2 * foot] = cdot / T
    out = np.empty(14)
    out[0] = y[2]
    out[1] = y[3]
    out[2] = (u[0] + u[2]) / mass
    out[3] = (u[1] + u[3]) / mass - grav
    out[4] = y[5]
    torque = (
        (y[6] - y[0]) * u[1]
        - (y[7] - y[1]) * u[0]
        + (y[8] - y[0]) * u[3]
        - (y[9] - y[1]) * u[2]
    )
    out[5] = torque / inertia
    out[6] = u[4]
    out[7] = u[5]
    out[8] = u[6]
    out[9] = u[7]
    for i in range(4):
        out[10 + i] = (u[4 + i] - y[10 + i]) / tau
    return out


@kernel(nogil=True)
def planar_input_batch(times, states, p):
    """Mode-consistent projected policy inputs at given (time, state) rows.

    Applies the same input clamp as :func:`planar_rollout_rhs`: cone
    projection and zero velocity commands on stance feet, zero forces
    and profile-tracking vertical velocity on the swing foot.
    """
    mp, pol = p
    flags = mp[0]
    cpoly = mp[1]
    tspan = mp[2]
    consts = mp[5]
    mu = consts[3]
    ptimes, puff, pgain = pol
    K = times.shape[0]
    out = np.empty((K, 8))
    T = tspan[1] - tspan[0]
    for i in range(K):
        t = times[i]
        k = np.searchsorted(ptimes, t)
        if k <= 0:
            j = 0
        elif k >= ptimes.shape[0]:
            j = ptimes.shape[0] - 2
        else:
            j = k - 1
        dt = ptimes[j + 1] - ptimes[j]
        w = 0.0 if dt <= 0.0 else (t - ptimes[j]) / dt
        if w < 0.0:
            w = 0.0
        elif w > 1.0:
            w = 1.0
        uff = (1.0 - w) * puff[j] + w * puff[j + 1]
        gain = (1.0 - w) * pgain[j] + w * pgain[j + 1]
        out[i] = uff + gain @ states[i]
        for foot in range(2):
            if flags[foot] > 0.5:
                lx = out[i, 2 * foot]
                lz = out[i, 2 * foot + 1]
                if not (lz >= 0.0 and abs(lx) <= mu * lz):
                    if lz <= -mu * abs(lx):
                        out[i, 2 * foot] = 0.0
                        out[i, 2 * foot + 1] = 0.0
                    else:
                        sgn = 1.0 if lx >= 0.0 else -1.0
                        edge = (sgn * mu * lx + lz) / (1.0 + mu * mu)
                        out[i, 2 * foot] = edge * sgn * mu
                        out[i, 2 * foot + 1] = edge
                out[i, 4 + 2 * foot] = 0.0
                out[i, 5 + 2 * foot] = 0.0
            else:
                out[i, 2 * foot] = 0.0
                out[i, 2 * foot + 1] = 0.0
                s = (t - tspan[0]) / T
                if s < 0.0:
                    s = 0.0
                elif s > 1.0:
                    s = 1.0
                cdot = 0.0
                for ci in range(5, 0, -1):
                    cdot = cdot * s + ci * cpoly[ci]
                out[i, 5 + 2 * foot] = cdot / T
    return out


@kernel(nogil=True)
def planar_lq_fill(times, states, inputs, mp):
    """Analytic LQ data of the planar model along the nodes."""
    flags = mp[0]
    cpoly = mp[1]
    tspan = mp[2]
    Qm = mp[3]
    Rm = mp[4]
    consts = mp[5]
    xref = mp[6]
    uref = mp[7]
    mass = consts[0]
    inertia = consts[2]
    tau = consts[4]
    K = times.shape[0]
    n = 14
    m = 8
    nsw = 0
    for foot in range(2):
        if flags[foot] < 0.5:
            nsw += 1
    c1 = 4 + nsw
    A = np.zeros((K, n, n))
    B = np.zeros((K, n, m))
    C = np.zeros((K, c1, n))
    D = np.zeros((K, c1, m))
    e = np.zeros((K, c1))
    F = np.zeros((K, 0, n))
    h = np.zeros((K, 0))
    P = np.zeros((K, n, m))
    Q = np.empty((K, n, n))
    qv = np.empty((K, n))
    r = np.empty((K, m))
    R = np.empty((K, m, m))
    stage = np.empty(K)
    T = tspan[1] - tspan[0]
    for k in range(K):
        x = states[k]
        u = inputs[k]
        t = times[k]
        A[k, 0, 2] = 1.0
        A[k, 1, 3] = 1.0
        A[k, 4, 5] = 1.0
        A[k, 5, 0] = -(u[1] + u[3]) / inertia
        A[k, 5, 1] = (u[0] + u[2]) / inertia
        A[k, 5, 6] = u[1] / inertia
        A[k, 5, 7] = -u[0] / inertia
        A[k, 5, 8] = u[3] / inertia
        A[k, 5, 9] = -u[2] / inertia
        for i in range(4):
            A[k, 10 + i, 10 + i] = -1.0 / tau
        B[k, 2, 0] = 1.0 / mass
        B[k, 2, 2] = 1.0 / mass
        B[k, 3, 1] = 1.0 / mass
        B[k, 3, 3] = 1.0 / mass
        B[k, 5, 0] = -(x[7] - x[1]) / inertia
        B[k, 5, 1] = (x[6] - x[0]) / inertia
        B[k, 5, 2] = -(x[9] - x[1]) / inertia
        B[k, 5, 3] = (x[8] - x[0]) / inertia
        B[k, 6, 4] = 1.0
        B[k, 7, 5] = 1.0
        B[k, 8, 6] = 1.0
        B[k, 9, 7] = 1.0
        for i in range(4):
            B[k, 10 + i, 4 + i] = 1.0 / tau
        row = 0
        for foot in range(2):
            if flags[foot] > 0.5:
                D[k, row, 4 + 2 * foot] = 1.0
                e[k, row] = u[4 + 2 * foot]
                row += 1
                D[k, row, 5 + 2 * foot] = 1.0
                e[k, row] = u[5 + 2 * foot]
                row += 1
            else:
                D[k, row, 2 * foot] = 1.0
                e[k, row] = u[2 * foot]
                row += 1
                D[k, row, 2 * foot + 1] = 1.0
                e[k, row] = u[2 * foot + 1]
                row += 1
                s = (t - tspan[0]) / T
                if s < 0.0:
                    s = 0.0
                elif s > 1.0:
                    s = 1.0
                cdot = 0.0
                for i in range(5, 0, -1):
                    cdot = cdot * s + i * cpoly[i]
                cdot /= T
                D[k, row, 5 + 2 * foot] = 1.0
                e[k, row] = u[5 + 2 * foot] - cdot
                row += 1
        dx = x - xref
        du = u - uref
        Q[k] = Qm
        R[k] = Rm
        qv[k] = Qm @ dx
        r[k] = Rm @ du
        stage[k] = 0.5 * (dx @ (Qm @ dx)) + 0.5 * (du @ (Rm @ du))
    return A, B, C, D, e, F, h, P, Q, qv, r, R, stage


@kernel(nogil=True)
def planar_stage_cost_batch(times, states, inputs, mp):
    Qm = mp[3]
    Rm = mp[4]
    xref = mp[6]
    uref = mp[7]
    K = times.shape[0]
    out = np.empty(K)
    for k in range(K):
        dx = states[k] - xref
        du = inputs[k] - uref
        out[k] = 0.5 * (dx @ (Qm @ dx)) + 0.5 * (du @ (Rm @ du))
    return out


def _planar_dynamics_callables(model: PlanarLeggedModel):
    mass = model.mass
    grav = model.gravity
    inertia = model.inertia
    tau = model.velocity_filter_tau

    def dynamics(x, u, t):
        out = np.empty(PLANAR_STATE_DIM)
        out[0] = x[2]
        out[1] = x[3]
        out[2] = (u[0] + u[2]) / mass
        out[3] = (u[1] + u[3]) / mass - grav
        out[4] = x[5]
        torque = (
            (x[6] - x[0]) * u[1]
            - (x[7] - x[1]) * u[0]
            + (x[8] - x[0]) * u[3]
            - (x[9] - x[1]) * u[2]
        )
        out[5] = torque / inertia
        out[6:10] = u[4:8]
        out[10:14] = (u[4:8] - x[10:14]) / tau
        return out

    def jacobians(x, u, t):
        A = np.zeros((PLANAR_STATE_DIM, PLANAR_STATE_DIM))
        B = np.zeros((PLANAR_STATE_DIM, PLANAR_INPUT_DIM))
        A[0, 2] = 1.0
        A[1, 3] = 1.0
        A[4, 5] = 1.0
        A[5, 0] = -(u[1] + u[3]) / inertia
        A[5, 1] = (u[0] + u[2]) / inertia
        A[5, 6] = u[1] / inertia
        A[5, 7] = -u[0] / inertia
        A[5, 8] = u[3] / inertia
        A[5, 9] = -u[2] / inertia
        for i in range(4):
            A[10 + i, 10 + i] = -1.0 / tau
        B[2, 0] = B[2, 2] = 1.0 / mass
        B[3, 1] = B[3, 3] = 1.0 / mass
        B[5, 0] = -(x[7] - x[1]) / inertia
        B[5, 1] = (x[6] - x[0]) / inertia
        B[5, 2] = -(x[9] - x[1]) / inertia
        B[5, 3] = (x[8] - x[0]) / inertia
        B[6, 4] = B[7, 5] = B[8, 6] = B[9, 7] = 1.0
        for i in range(4):
            B[10 + i, 4 + i] = 1.0 / tau
        return A, B

    return dynamics, jacobians


def _planar_constraint_callables(flags: tuple, occurrences: list):
    """Equality residual and Jacobian closures for one subsystem.

    ``occurrences`` lists (lift_off, touch_down, coefficients) for each
    schedule interval where this subsystem runs; the residual picks the
    occurrence containing ``t`` (nearest one outside any span, e.g. for
    finite-difference probes at boundary times).
    """
    c1 = 4 + sum(1 for f in flags if f < 0.5)

    D = np.zeros((c1, PLANAR_INPUT_DIM))
    row = 0
    for foot in range(2):
        if flags[foot] > 0.5:
            D[row, 4 + 2 * foot] = 1.0
            D[row + 1, 5 + 2 * foot] = 1.0
            row += 2
        else:
            D[row, 2 * foot] = 1.0
            D[row + 1, 2 * foot + 1] = 1.0
            D[row + 2, 5 + 2 * foot] = 1.0
            row += 3
    C = np.zeros((c1, PLANAR_STATE_DIM))

    def pick_occurrence(t):
        best = occurrences[0]
        best_dist = float("inf")
        for lo, hi, coef in occurrences:
            if lo - 1e-9 <= t <= hi + 1e-9:
                return lo, hi, coef
            dist = min(abs(t - lo), abs(t - hi))
            if dist < best_dist:
                best_dist = dist
                best = (lo, hi, coef)
        return best

    def g1(x, u, t):
        res = np.empty(c1)
        row = 0
        for foot in range(2):
            if flags[foot] > 0.5:
                res[row] = u[4 + 2 * foot]
                res[row + 1] = u[5 + 2 * foot]
                row += 2
            else:
                res[row] = u[2 * foot]
                res[row + 1] = u[2 * foot + 1]
                lo, hi, coef = pick_occurrence(t)
                res[row + 2] = u[5 + 2 * foot] - _poly_cdot(coef, lo, hi, t)
                row += 3
        return res

    def g1_jac(x, u, t):
        return C, D

    return g1, g1_jac, c1


def _planar_inequality_callables(flags: tuple, mu: float):
    stance_feet = [foot for foot in range(2) if flags[foot] > 0.5]
    n_ineq = 3 * len(stance_feet)
    dHx = np.zeros((n_ineq, PLANAR_STATE_DIM))
    dHu = np.zeros((n_ineq, PLANAR_INPUT_DIM))
    for k, foot in enumerate(stance_feet):
        dHu[3 * k, 2 * foot + 1] = 1.0
        dHu[3 * k + 1, 2 * foot] = -1.0
        dHu[3 * k + 1, 2 * foot + 1] = mu
        dHu[3 * k + 2, 2 * foot] = 1.0
        dHu[3 * k + 2, 2 * foot + 1] = mu

    def ineq(x, u, t):
        res = np.empty(n_ineq)
        for k, foot in enumerate(stance_feet):
            lx = u[2 * foot]
            lz = u[2 * foot + 1]
            res[3 * k] = lz
            res[3 * k + 1] = mu * lz - lx
            res[3 * k + 2] = mu * lz + lx
        return res

    def ineq_jac(x, u, t):
        return dHx, dHu

    return ineq, ineq_jac, n_ineq


def _quadratic_stage_cost(Q: np.ndarray, R: np.ndarray, xref: np.ndarray, uref: np.ndarray) -> StageCost:
    n, m = Q.shape[0], R.shape[0]

    def value(x, u, t):
        dx = x - xref
        du = u - uref
        return 0.5 * float(dx @ (Q @ dx)) + 0.5 * float(du @ (R @ du))

    def derivs(x, u, t):
        dx = x - xref
        du = u - uref
        return Q @ dx, R @ du, Q, R, np.zeros((n, m))

    return StageCost(value, derivs)


def _quadratic_terminal(Q_f: np.ndarray, xref: np.ndarray) -> TerminalCost:
    def value(x):
        dx = x - xref
        return 0.5 * float(dx @ (Q_f @ dx))

    def derivs(x):
        dx = x - xref
        return Q_f @ dx, Q_f

    return TerminalCost(value, derivs)


def _planar_reference_input(model: PlanarLeggedModel, flags: tuple) -> np.ndarray:
    """Gravity-compensating stance forces, zero foot velocities."""
    uref = np.zeros(PLANAR_INPUT_DIM)
    stance = [foot for foot in range(2) if flags[foot] > 0.5]
    if stance:
        share = model.mass * model.gravity / len(stance)
        for foot in stance:
            uref[2 * foot + 1] = share
    return uref


def make_planar_trot_problem(
    gait: GaitPattern | None = None,
    task: TrotTask | str = "regulation",
    weights: TrotWeights | None = None,
    model: PlanarLeggedModel | None = None,
    schedule: ModeSchedule | None = None,
    num_modes: int = 4,
    t0: float = 0.0,
    start_position: int = 0,
    swing_apex: float = 0.1,
    x0: np.ndarray | None = None,
    name: str = "planar-trot",
) -> SwitchedProblem:
    """Planar trot problem over a gait window.

    The default schedule unrolls ``num_modes`` gait phases from ``t0``;
    passing ``schedule`` directly (as the MPC horizon extension does via
    ``rebuild``) overrides that.  Per-mode equality constraints pin
    stance-foot velocities to zero and tie the swing foot's vertical
    velocity to the quintic profile while zeroing its contact forces;
    stance forces live inside the friction cone, enforced by projection
    during rollouts.
    """
    gait = gait or trot_gait()
    if isinstance(task, str):
        task = TrotTask(kind=task)
    weights = weights or TrotWeights()
    model = model or PlanarLeggedModel()
    if schedule is None:
        schedule = gait.unroll(t0, num_modes, start_position)
    for sid in schedule.subsystem_ids:
        if sid not in _STANCE_FLAGS:
            raise DimensionMismatch(f"schedule references unknown trot subsystem {sid}")

    offset = task.reference_offset()
    xref = model.nominal_state(offset)
    x0 = model.nominal_state(0.0) if x0 is None else np.ascontiguousarray(x0, dtype=float)
    if x0.shape != (PLANAR_STATE_DIM,):
        raise DimensionMismatch(f"x0 shape {x0.shape} != ({PLANAR_STATE_DIM},)")

    # Swing occurrences per subsystem, from the actual schedule.
    occurrences: dict = {SWING_FOOT_0: [], SWING_FOOT_1: []}
    mode_profiles = []
    for i, sid in enumerate(schedule.subsystem_ids):
        lo, hi = schedule.mode_span(i)
        if sid in occurrences:
            profile = SwingProfile(lo, hi, swing_apex)
            coef = profile.coefficients()
            occurrences[sid].append((lo, hi, coef))
            mode_profiles.append(coef)
        else:
            mode_profiles.append(np.zeros(6))
    for sid in occurrences:
        if not occurrences[sid]:
            # Probe-safe placeholder for a subsystem the schedule never uses.
            occurrences[sid].append((0.0, 1.0, SwingProfile(0.0, 1.0, swing_apex).coefficients()))

    dynamics, dynamics_jacobians = _planar_dynamics_callables(model)
    consts = model.consts_array()

    subsystems = []
    costs = []
    sub_data = {}
    for sid in (FULL_STANCE, SWING_FOOT_0, SWING_FOOT_1):
        flags = _STANCE_FLAGS[sid]
        g1, g1_jac, c1 = _planar_constraint_callables(flags, occurrences.get(sid, [(0.0, 1.0, np.zeros(6))]))
        ineq, ineq_jac, n_ineq = _planar_inequality_callables(flags, model.friction_coeff)
        subsystems.append(
            SubsystemModel(
                dynamics=dynamics,
                dynamics_jacobians=dynamics_jacobians,
                state_input_constraints=g1,
                state_input_constraint_jacobians=g1_jac,
                inequality_constraints=ineq,
                inequality_jacobians=ineq_jac,
                num_eq_state_input=c1,
                num_ineq=n_ineq,
                name=("full-stance", "swing-foot-0", "swing-foot-1")[sid],
            )
        )
        Qd = np.diag(weights.state_diagonal(flags))
        Rd = np.diag(weights.input_diagonal())
        uref = _planar_reference_input(model, flags)
        costs.append(_quadratic_stage_cost(Qd, Rd, xref, uref))
        sub_data[sid] = (np.array(flags), Qd, Rd, uref)

    mode_params = []
    for i, sid in enumerate(schedule.subsystem_ids):
        flags_arr, Qd, Rd, uref = sub_data[sid]
        lo, hi = schedule.mode_span(i)
        mode_params.append(
            (
                flags_arr,
                np.ascontiguousarray(mode_profiles[i]),
                np.array([lo, hi]),
                Qd,
                Rd,
                consts,
                xref,
                uref,
            )
        )

    kernels = KernelPack(
        rollout_rhs=planar_rollout_rhs,
        input_batch=planar_input_batch,
        lq_fill=planar_lq_fill,
        stage_cost_batch=planar_stage_cost_batch,
        mode_params=tuple(mode_params),
    )

    Q_f = np.diag(weights.terminal_diagonal())

    def rebuild(new_schedule: ModeSchedule) -> SwitchedProblem:
        return make_planar_trot_problem(
            gait=gait,
            task=task,
            weights=weights,
            model=model,
            schedule=new_schedule,
            swing_apex=swing_apex,
            x0=x0,
            name=name,
        )

    return SwitchedProblem(
        schedule=schedule,
        subsystems=tuple(subsystems),
        costs=tuple(costs),
        x0=x0,
        state_dim=PLANAR_STATE_DIM,
        input_dim=PLANAR_INPUT_DIM,
        terminal_cost=_quadratic_terminal(Q_f, xref),
        kernels=kernels,
        rebuild=rebuild,
        state_names=PLANAR_STATE_NAMES,
        input_names=PLANAR_INPUT_NAMES,
        name=name,
    )


def reference_input_policy(problem: SwitchedProblem) -> LinearFeedbackPolicy:
    """Zero-gain policy holding each mode's reference input.

    Relies on the family convention that each mode's parameter tuple
    ends with (x_ref, u_ref).  For the planar model this is the
    gravity-compensating stance policy, a much better line-search
    starting point than zero input (which free-falls).
    """
    if problem.kernels is None:
        raise ValueError("reference policy needs a problem with family kernels")
    segs = []
    n = problem.state_dim
    for i in range(problem.schedule.num_modes):
        uref = np.asarray(problem.kernels.mode_params[i][-1], dtype=float)
        lo, hi = problem.schedule.mode_span(i)
        segs.append(
            PolicySegment(
                mode=i,
                times=np.array([lo, hi]),
                uff=np.vstack((uref, uref)),
                gain=np.zeros((2, uref.size, n)),
            )
        )
    return LinearFeedbackPolicy(segs)
