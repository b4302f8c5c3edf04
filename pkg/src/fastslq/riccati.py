"""Constrained Riccati backward sweep over one horizon partition.

Each partition (one mode interval) solves a final-value problem for the
quadratic value-function coefficients: the state-input equality rows are
eliminated by projection through the input metric, state-only rows enter
as a quadratic penalty, and the resulting Riccati-like ODEs are
integrated backward adaptively.  The sweep also produces, at every
accepted node, the feedback gain and the two feedforward terms (cost
step and constraint restoration) that define the updated policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import IntegrationFailure, RankDeficientConstraint, RiccatiBlowup
from .integrate import IntegratorSettings, run_core
from .lq import LqNode, ModeLqData, TerminalLqNode
from .problem import Trajectory

RICCATI_NORM_CAP = 1e12


@dataclass
class ProjectedLq:
    """Constraint-projected LQ coefficients at one node.

    ``D_pinv`` maps constraint residuals to inputs through the R-weighted
    right inverse; suffix ``p`` marks projected quantities (A_p is the
    drift on the constraint manifold, R_p the input weight restricted to
    its null space, and so on).  ``w = R e_p``, ``cre = C_p' w`` and
    ``ew = e_p' w / 2`` feed the restoration column and the value offset
    of the backward sweep.
    """

    D_pinv: np.ndarray
    A_p: np.ndarray
    C_p: np.ndarray
    D_p: np.ndarray
    e_p: np.ndarray
    Q_p: np.ndarray
    q_p: np.ndarray
    R_p: np.ndarray
    B: np.ndarray
    P: np.ndarray
    R_inv: np.ndarray
    r: np.ndarray
    q: float
    w: np.ndarray
    cre: np.ndarray
    ew: float


@dataclass
class RiccatiFinalValues:
    """Boundary values (S, s, se, s0) at a partition's end time."""

    S: np.ndarray
    s_vec: np.ndarray
    s_e: np.ndarray
    s0: float

    def packed(self) -> np.ndarray:
        n = self.s_vec.size
        y = np.empty(n * n + 2 * n + 1)
        S = 0.5 * (self.S + self.S.T)
        y[: n * n] = S.reshape(-1)
        y[n * n : n * n + n] = self.s_vec
        y[n * n + n : n * n + 2 * n] = self.s_e
        y[-1] = self.s0
        return y


@dataclass(frozen=True)
class TerminalQuadratic:
    """Standalone quadratic terminal value around a reference state.

    V_h(x) = offset + 0.5 (x - x_ref)' S (x - x_ref).  Used as the
    receding-horizon tail cost; ``expand_at`` re-centers it on the
    current nominal end state so it can merge with mode terminals.
    """

    S: np.ndarray
    x_ref: np.ndarray
    offset: float = 0.0

    def value(self, x: np.ndarray) -> float:
        dx = np.asarray(x, float) - self.x_ref
        return self.offset + 0.5 * float(dx @ (self.S @ dx))

    def expand_at(self, x: np.ndarray) -> TerminalLqNode:
        dx = np.asarray(x, float) - self.x_ref
        return TerminalLqNode(
            q_f=self.value(x),
            q_vec_f=self.S @ dx,
            Q_f=0.5 * (self.S + self.S.T),
        )


class ValueFunction:
    """One partition's quadratic value-function model plus controller data.

    Coefficients are stored at the backward integrator's accepted nodes
    and interpolated linearly in between.  The model is anchored to the
    nominal trajectory: V(x, t) expands in dx = x - xbar(t), and the
    stored feedback/feedforward rows turn directly into the updated
    policy at the same nodes.
    """

    def __init__(
        self,
        times: np.ndarray,
        packed: np.ndarray,
        state_dim: int,
        nominal: Trajectory,
        gain: np.ndarray,
        step_ff: np.ndarray,
        restore_ff: np.ndarray,
        mode: int,
    ):
        self.times = times
        self.packed = packed
        self.n = state_dim
        self.nominal = nominal
        self.gain = gain
        self.step_ff = step_ff
        self.restore_ff = restore_ff
        self.mode = mode

    @property
    def t_lo(self) -> float:
        return float(self.times[0])

    @property
    def t_hi(self) -> float:
        return float(self.times[-1])

    def coeffs_at(self, t: float) -> tuple:
        """(S, s_vec, s_e, s0) linearly interpolated at ``t`` (clamped)."""
        n = self.n
        tc = min(max(float(t), self.t_lo), self.t_hi)
        j = int(np.searchsorted(self.times, tc, side="right")) - 1
        j = min(max(j, 0), self.times.size - 2)
        dt = self.times[j + 1] - self.times[j]
        w = 0.0 if dt <= 0.0 else (tc - self.times[j]) / dt
        row = (1.0 - w) * self.packed[j] + w * self.packed[j + 1]
        S = row[: n * n].reshape(n, n)
        S = 0.5 * (S + S.T)
        return S, row[n * n : n * n + n], row[n * n + n : n * n + 2 * n], float(row[-1])

    def start_values(self) -> RiccatiFinalValues:
        S, sv, se, s0 = self.coeffs_at(self.t_lo)
        return RiccatiFinalValues(S, sv.copy(), se.copy(), s0)


def _stack_one(node: LqNode) -> tuple:
    def one(a):
        return np.ascontiguousarray(a, dtype=float)[None, ...]

    return (
        one(node.A),
        one(node.B),
        one(node.C),
        one(node.D),
        one(node.e),
        one(node.F),
        one(node.h),
        one(node.P),
        one(node.Q),
        one(node.q_vec),
        one(node.r),
        one(node.R),
    )


def project_constraints(node: LqNode, rho: float) -> ProjectedLq:
    """Projected coefficients of a single LQ node (reference path).

    Runs the same batch kernel the solver uses, on a one-node stack, so
    the single-node semantics and the hot path cannot drift apart.
    """
    A, B, C, D, e, F, h, P, Q, q_vec, r, R = _stack_one(node)
    status, bad, Ap, Dpinv, Cp, Dp, ep, Rinv, Qp, qp, Rp, w, cre, ew = (
        _kernels.project_lq_nodes.py_func(A, B, C, D, e, F, h, P, Q, q_vec, r, R, float(rho))
    )
    if status == _kernels.PROJ_RANK_DEFICIENT:
        raise RankDeficientConstraint(
            f"constraint rows rank deficient at t={node.t!r} (after Tikhonov retry)"
        )
    return ProjectedLq(
        D_pinv=Dpinv[0],
        A_p=Ap[0],
        C_p=Cp[0],
        D_p=Dp[0],
        e_p=ep[0],
        Q_p=Qp[0],
        q_p=qp[0],
        R_p=Rp[0],
        B=B[0],
        P=P[0],
        R_inv=Rinv[0],
        r=r[0],
        q=float(node.q),
        w=w[0],
        cre=cre[0],
        ew=float(ew[0]),
    )


def riccati_rhs(t: float, S, s_vec, s_e, s0: float, pc: ProjectedLq) -> tuple:
    """Time derivatives (Sdot, sdot, sedot, s0dot) at one instant.

    Reference single-point form of the backward ODE right-hand side; the
    solver integrates the identical arithmetic through the batch kernel.
    ``Sdot`` is symmetrized before return.
    """
    n = s_vec.size
    y = RiccatiFinalValues(np.asarray(S, float), np.asarray(s_vec, float), np.asarray(s_e, float), float(s0)).packed()
    times = np.array([t - 0.5, t + 0.5])

    def two(a):
        a = np.ascontiguousarray(a, dtype=float)
        return np.stack((a, a))

    params = (
        times,
        two(pc.A_p),
        two(pc.B),
        two(pc.P),
        two(pc.R_inv),
        two(pc.r),
        two(pc.R_p),
        two(pc.Q_p),
        two(pc.q_p),
        np.array([pc.q, pc.q]),
        two(pc.w),
        two(pc.cre),
        np.array([pc.ew, pc.ew]),
    )
    dy = _kernels.riccati_rhs.py_func(float(t), y, params)
    dS = dy[: n * n].reshape(n, n)
    return dS, dy[n * n : n * n + n], dy[n * n + n : n * n + 2 * n], float(dy[-1])


def final_values(
    terminal: TerminalLqNode,
    next_vf: ValueFunction | None,
    x_next: np.ndarray,
    t_next: float,
) -> RiccatiFinalValues:
    """Boundary values for one partition's backward sweep.

    Adds the mode-end terminal expansion to the neighbor partition's
    value function evaluated at the CURRENT nominal boundary state: the
    quadratic coefficient carries over unchanged while the gradient and
    value pick up first-order corrections in dx = xbar_now - xbar_stored.
    In the sequential sweep the neighbor was just solved on the same
    nominal, so dx = 0 and this reduces to plain continuation.
    """
    n = x_next.size
    S = terminal.Q_f.copy()
    sv = terminal.q_vec_f.copy()
    se = np.zeros(n)
    s0 = float(terminal.q_f)
    if next_vf is not None:
        Sn, svn, sen, s0n = next_vf.coeffs_at(t_next)
        dx = np.asarray(x_next, float) - next_vf.nominal.state_at(t_next)
        S = S + Sn
        sv = sv + svn + Sn @ dx
        se = se + sen
        s0 = s0 + s0n + float(svn @ dx) + 0.5 * float(dx @ (Sn @ dx)) + float(sen @ dx)
    return RiccatiFinalValues(0.5 * (S + S.T), sv, se, s0)


def solve_partition_backward(
    mode_lq: ModeLqData,
    finals: RiccatiFinalValues,
    nominal: Trajectory,
    settings: IntegratorSettings,
    rho: float,
    compiled: bool,
) -> ValueFunction:
    """Backward-integrate one partition's value function.

    Projects the partition's LQ nodes, integrates the Riccati-like ODEs
    from the partition end down to its start, and extracts the controller
    rows at every accepted node.  Pure: safe to run partitions
    concurrently with read-only shared inputs.
    """
    proj = _kernels.project_lq_nodes.get(compiled)
    status, bad, Ap, Dpinv, Cp, Dp, ep, Rinv, Qp, qp, Rp, w, cre, ew = proj(
        np.ascontiguousarray(mode_lq.A),
        np.ascontiguousarray(mode_lq.B),
        np.ascontiguousarray(mode_lq.C),
        np.ascontiguousarray(mode_lq.D),
        np.ascontiguousarray(mode_lq.e),
        np.ascontiguousarray(mode_lq.F),
        np.ascontiguousarray(mode_lq.h),
        np.ascontiguousarray(mode_lq.P),
        np.ascontiguousarray(mode_lq.Q),
        np.ascontiguousarray(mode_lq.q_vec),
        np.ascontiguousarray(mode_lq.r),
        np.ascontiguousarray(mode_lq.R),
        float(rho),
    )
    if status == _kernels.PROJ_RANK_DEFICIENT:
        raise RankDeficientConstraint(
            f"partition {mode_lq.mode}: constraint rows rank deficient at node {bad} "
            f"(t={mode_lq.times[bad]:.6g}) after Tikhonov retry"
        )

    params = (
        mode_lq.times,
        Ap,
        np.ascontiguousarray(mode_lq.B),
        np.ascontiguousarray(mode_lq.P),
        Rinv,
        np.ascontiguousarray(mode_lq.r),
        Rp,
        Qp,
        qp,
        np.ascontiguousarray(mode_lq.stage),
        w,
        cre,
        ew,
    )
    t_lo = float(mode_lq.times[0])
    t_hi = float(mode_lq.times[-1])
    times, ys, _fs, istatus, attempts = run_core(
        _kernels.riccati_rhs, params, t_hi, t_lo, finals.packed(), settings, RICCATI_NORM_CAP, compiled
    )
    if istatus == _kernels.INT_DIVERGED:
        raise RiccatiBlowup(
            f"partition {mode_lq.mode}: value function norm exceeded {RICCATI_NORM_CAP:.0e} "
            f"near t={times[-1]:.6g}"
        )
    if istatus != _kernels.INT_OK:
        raise IntegrationFailure(
            f"partition {mode_lq.mode}: backward sweep failed "
            f"(status {istatus}, {attempts} attempts, reached t={times[-1]:.6g})"
        )

    vtimes = times[::-1].copy()
    vstates = ys[::-1].copy()
    ctrl = _kernels.controller_stage.get(compiled)
    gain, step_ff, restore_ff = ctrl(
        vtimes,
        vstates,
        mode_lq.times,
        np.ascontiguousarray(mode_lq.B),
        np.ascontiguousarray(mode_lq.P),
        Rinv,
        np.ascontiguousarray(mode_lq.r),
        Dp,
        Cp,
        ep,
    )
    return ValueFunction(
        vtimes,
        vstates,
        mode_lq.Q.shape[1],
        nominal,
        gain,
        step_ff,
        restore_ff,
        mode_lq.mode,
    )


def evaluate_value_function(vf: ValueFunction, x: np.ndarray, t: float) -> tuple:
    """(value, gradient, hessian) of the full model V + V_e at (x, t).

    The restoration part contributes its linear term to both value and
    gradient; the Hessian is the quadratic coefficient alone.
    """
    S, sv, se, s0 = vf.coeffs_at(t)
    dx = np.asarray(x, float) - vf.nominal.state_at(t)
    grad_lin = sv + se
    value = s0 + float(grad_lin @ dx) + 0.5 * float(dx @ (S @ dx))
    return value, grad_lin + S @ dx, S
