"""Local LQ models along a nominal trajectory.

For each mode the builder evaluates, at every rollout node, the
linearized dynamics (A, B), the linearized constraints (C, D, e for
state-input rows; F, h for state-only rows) and the quadratic cost
expansion (q, q_vec, r, P, Q, R), then attaches one terminal expansion
per mode.  Between nodes every coefficient is interpolated linearly.

Derivatives come from analytic callables when the model provides them
and from central finite differences otherwise (step eta * max(1, |v|),
eta = 2^-17, roughly the cube root of machine epsilon, balancing
truncation against roundoff for second derivatives).

Regularization keeps the Gauss-Newton subproblem well posed: R receives
a positive-definite floor of 1e-6 and Q a Levenberg-style shift when its
smallest eigenvalue falls below 1e-9 (the full [Q P; P' R] block is
checked when a cross term is present).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteDerivative, NonFiniteJacobian, OutOfSpan
from .problem import StageCost, SubsystemModel, SwitchedProblem, TerminalCost, Trajectory

FD_ETA = 2.0**-17
Q_SHIFT_EPS = 1e-9
R_FLOOR = 1e-6


@dataclass
class LqNode:
    """All LQ coefficients at one time instant."""

    t: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    e: np.ndarray
    F: np.ndarray
    h: np.ndarray
    q: float
    q_vec: np.ndarray
    r: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray


@dataclass
class TerminalLqNode:
    """Quadratic expansion of a terminal cost at the mode-end state."""

    q_f: float
    q_vec_f: np.ndarray
    Q_f: np.ndarray


@dataclass
class ModeLqData:
    """Stacked LQ coefficients of one mode, one row per rollout node.

    Shapes: times (K,), A (K,n,n), B (K,n,m), C (K,c1,n), D (K,c1,m),
    e (K,c1), F (K,c2,n), h (K,c2), P (K,n,m), Q (K,n,n), q_vec (K,n),
    r (K,m), R (K,m,m), stage (K,) holding L(xbar, ubar, t).
    """

    mode: int
    times: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    e: np.ndarray
    F: np.ndarray
    h: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    q_vec: np.ndarray
    r: np.ndarray
    R: np.ndarray
    stage: np.ndarray
    terminal: TerminalLqNode

    def node(self, k: int) -> LqNode:
        return LqNode(
            t=float(self.times[k]),
            A=self.A[k],
            B=self.B[k],
            C=self.C[k],
            D=self.D[k],
            e=self.e[k],
            F=self.F[k],
            h=self.h[k],
            q=float(self.stage[k]),
            q_vec=self.q_vec[k],
            r=self.r[k],
            P=self.P[k],
            Q=self.Q[k],
            R=self.R[k],
        )


@dataclass
class LqApproximation:
    """Per-mode stacked LQ data covering the solved span."""

    modes: tuple
    state_dim: int
    input_dim: int

    @property
    def t_start(self) -> float:
        return float(self.modes[0].times[0])

    @property
    def t_end(self) -> float:
        return float(self.modes[-1].times[-1])


def _fd_steps(v: np.ndarray) -> np.ndarray:
    return FD_ETA * np.maximum(1.0, np.abs(v))


def fd_jacobian(fn, v: np.ndarray, out_dim: int) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``v`` (columns over v)."""
    steps = _fd_steps(v)
    jac = np.empty((out_dim, v.size))
    for i in range(v.size):
        vp = v.copy()
        vm = v.copy()
        vp[i] += steps[i]
        vm[i] -= steps[i]
        jac[:, i] = (np.asarray(fn(vp)) - np.asarray(fn(vm))) / (2.0 * steps[i])
    return jac


def _fd_gradient(fn, v: np.ndarray) -> np.ndarray:
    steps = _fd_steps(v)
    grad = np.empty(v.size)
    for i in range(v.size):
        vp = v.copy()
        vm = v.copy()
        vp[i] += steps[i]
        vm[i] -= steps[i]
        grad[i] = (fn(vp) - fn(vm)) / (2.0 * steps[i])
    return grad


def _fd_hessian(fn, v: np.ndarray) -> np.ndarray:
    """Central-difference Hessian of a scalar function of one vector."""
    steps = _fd_steps(v)
    d = v.size
    hess = np.empty((d, d))
    f0 = fn(v)
    for i in range(d):
        vp = v.copy()
        vm = v.copy()
        vp[i] += steps[i]
        vm[i] -= steps[i]
        hess[i, i] = (fn(vp) - 2.0 * f0 + fn(vm)) / steps[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            vpp = v.copy()
            vpm = v.copy()
            vmp = v.copy()
            vmm = v.copy()
            vpp[i] += steps[i]
            vpp[j] += steps[j]
            vpm[i] += steps[i]
            vpm[j] -= steps[j]
            vmp[i] -= steps[i]
            vmp[j] += steps[j]
            vmm[i] -= steps[i]
            vmm[j] -= steps[j]
            hess[i, j] = (fn(vpp) - fn(vpm) - fn(vmp) + fn(vmm)) / (4.0 * steps[i] * steps[j])
            hess[j, i] = hess[i, j]
    return hess


def linearize_dynamics(sub: SubsystemModel, x: np.ndarray, u: np.ndarray, t: float) -> tuple:
    """Dynamics Jacobians (A, B) at a nominal point."""
    if sub.dynamics_jacobians is not None:
        A, B = sub.dynamics_jacobians(x, u, t)
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
    else:
        n = x.size
        A = fd_jacobian(lambda xv: sub.dynamics(xv, u, t), np.asarray(x, float), n)
        B = fd_jacobian(lambda uv: sub.dynamics(x, uv, t), np.asarray(u, float), n)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteJacobian(f"dynamics Jacobians non-finite at t={t!r}")
    return A, B


def linearize_constraints(sub: SubsystemModel, x: np.ndarray, u: np.ndarray, t: float) -> tuple:
    """Constraint linearization (C, D, e, F, h) at a nominal point.

    ``e`` and ``h`` are the residuals at the nominal point itself, so the
    linearized rows read C dx + D du + e = 0 and F dx + h = 0.
    """
    n = x.size
    m = u.size
    c1 = sub.num_eq_state_input
    c2 = sub.num_eq_state

    if c1 > 0:
        e = np.atleast_1d(np.asarray(sub.state_input_constraints(x, u, t), dtype=float))
        if sub.state_input_constraint_jacobians is not None:
            C, D = sub.state_input_constraint_jacobians(x, u, t)
            C = np.asarray(C, dtype=float)
            D = np.asarray(D, dtype=float)
        else:
            C = fd_jacobian(lambda xv: sub.state_input_constraints(xv, u, t), np.asarray(x, float), c1)
            D = fd_jacobian(lambda uv: sub.state_input_constraints(x, uv, t), np.asarray(u, float), c1)
    else:
        C = np.zeros((0, n))
        D = np.zeros((0, m))
        e = np.zeros(0)

    if c2 > 0:
        h = np.atleast_1d(np.asarray(sub.state_only_constraints(x, t), dtype=float))
        if sub.state_only_constraint_jacobian is not None:
            F = np.asarray(sub.state_only_constraint_jacobian(x, t), dtype=float)
        else:
            F = fd_jacobian(lambda xv: sub.state_only_constraints(xv, t), np.asarray(x, float), c2)
    else:
        F = np.zeros((0, n))
        h = np.zeros(0)

    for arr, label in ((C, "C"), (D, "D"), (e, "e"), (F, "F"), (h, "h")):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteJacobian(f"constraint block {label} non-finite at t={t!r}")
    return C, D, e, F, h


def regularize_cost_blocks(Q: np.ndarray, R: np.ndarray, P: np.ndarray) -> tuple:
    """Symmetrize and regularize one node's cost Hessian blocks.

    R gets a definite floor; Q gets a Levenberg shift when the relevant
    smallest eigenvalue (of Q alone, or of the full [Q P; P' R] block
    when P is nonzero) falls below the shift threshold.
    """
    Q = 0.5 * (Q + Q.T)
    R = 0.5 * (R + R.T)

    lam_r = float(np.linalg.eigvalsh(R)[0]) if R.size else 1.0
    if lam_r < R_FLOOR:
        R = R + (R_FLOOR - lam_r) * np.eye(R.shape[0])

    if P.size and np.any(P != 0.0):
        n = Q.shape[0]
        m = R.shape[0]
        block = np.empty((n + m, n + m))
        block[:n, :n] = Q
        block[:n, n:] = P
        block[n:, :n] = P.T
        block[n:, n:] = R
        lam = float(np.linalg.eigvalsh(block)[0])
    else:
        # Gershgorin lower bound is enough to skip the eig when clearly PD.
        diag = np.diag(Q)
        off = np.sum(np.abs(Q), axis=1) - np.abs(diag)
        if Q.size and float(np.min(diag - off)) >= Q_SHIFT_EPS:
            return Q, R, P
        lam = float(np.linalg.eigvalsh(Q)[0]) if Q.size else 1.0
    if lam < Q_SHIFT_EPS:
        Q = Q + (Q_SHIFT_EPS - lam) * np.eye(Q.shape[0])
    return Q, R, P


def quadratize_cost(cost: StageCost, x: np.ndarray, u: np.ndarray, t: float) -> tuple:
    """Quadratic expansion (q, q_vec, r, Q, R, P) of the stage cost.

    Analytic derivatives are used when provided; otherwise central
    finite differences.  Blocks are symmetrized and regularized.
    """
    q = float(cost.intermediate(x, u, t))
    if cost.intermediate_derivatives is not None:
        q_vec, r, Q, R, P = cost.intermediate_derivatives(x, u, t)
        q_vec = np.asarray(q_vec, dtype=float)
        r = np.asarray(r, dtype=float)
        Q = np.asarray(Q, dtype=float)
        R = np.asarray(R, dtype=float)
        P = np.asarray(P, dtype=float)
    else:
        n = x.size
        m = u.size
        z = np.concatenate([x, u])

        def joint(zv):
            return float(cost.intermediate(zv[:n], zv[n:], t))

        grad = _fd_gradient(joint, z)
        hess = _fd_hessian(joint, z)
        q_vec = grad[:n]
        r = grad[n:]
        Q = hess[:n, :n]
        R = hess[n:, n:]
        P = hess[:n, n:]

    if not (
        np.isfinite(q)
        and np.all(np.isfinite(q_vec))
        and np.all(np.isfinite(r))
        and np.all(np.isfinite(Q))
        and np.all(np.isfinite(R))
        and np.all(np.isfinite(P))
    ):
        raise NonFiniteDerivative(f"cost expansion non-finite at t={t!r}")
    Q, R, P = regularize_cost_blocks(Q, R, P)
    return q, q_vec, r, Q, R, P


def quadratize_terminal(terminal: TerminalCost | None, x: np.ndarray) -> TerminalLqNode:
    """Quadratic expansion of a terminal cost; zero when absent.

    The Hessian is shifted to be positive semidefinite when indefinite.
    """
    n = x.size
    if terminal is None:
        return TerminalLqNode(0.0, np.zeros(n), np.zeros((n, n)))
    q_f = float(terminal.value(x))
    if terminal.derivatives is not None:
        grad, hess = terminal.derivatives(x)
        grad = np.asarray(grad, dtype=float)
        hess = np.asarray(hess, dtype=float)
    else:
        grad = _fd_gradient(lambda xv: float(terminal.value(xv)), np.asarray(x, float))
        hess = _fd_hessian(lambda xv: float(terminal.value(xv)), np.asarray(x, float))
    if not (np.isfinite(q_f) and np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise NonFiniteDerivative("terminal cost expansion non-finite")
    hess = 0.5 * (hess + hess.T)
    lam = float(np.linalg.eigvalsh(hess)[0]) if hess.size else 0.0
    if lam < 0.0:
        hess = hess + (Q_SHIFT_EPS - lam) * np.eye(n)
    return TerminalLqNode(q_f, grad, hess)


def merge_terminals(a: TerminalLqNode, b: TerminalLqNode) -> TerminalLqNode:
    return TerminalLqNode(a.q_f + b.q_f, a.q_vec_f + b.q_vec_f, a.Q_f + b.Q_f)


def _fill_mode_python(problem, seg, sub, cost, num_threads):
    """Per-node LQ evaluation through the Python callables."""
    K = seg.times.size
    n = problem.state_dim
    m = problem.input_dim
    c1 = sub.num_eq_state_input
    c2 = sub.num_eq_state

    out = {
        "A": np.empty((K, n, n)),
        "B": np.empty((K, n, m)),
        "C": np.empty((K, c1, n)),
        "D": np.empty((K, c1, m)),
        "e": np.empty((K, c1)),
        "F": np.empty((K, c2, n)),
        "h": np.empty((K, c2)),
        "P": np.empty((K, n, m)),
        "Q": np.empty((K, n, n)),
        "q_vec": np.empty((K, n)),
        "r": np.empty((K, m)),
        "R": np.empty((K, m, m)),
        "stage": np.empty(K),
    }

    def eval_node(k):
        t = float(seg.times[k])
        x = seg.states[k]
        u = seg.inputs[k]
        A, B = linearize_dynamics(sub, x, u, t)
        C, D, e, F, h = linearize_constraints(sub, x, u, t)
        q, q_vec, r, Q, R, P = quadratize_cost(cost, x, u, t)
        out["A"][k] = A
        out["B"][k] = B
        out["C"][k] = C
        out["D"][k] = D
        out["e"][k] = e
        out["F"][k] = F
        out["h"][k] = h
        out["P"][k] = P
        out["Q"][k] = Q
        out["q_vec"][k] = q_vec
        out["r"][k] = r
        out["R"][k] = R
        out["stage"][k] = q

    if num_threads > 1 and K > 8:
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            list(pool.map(eval_node, range(K)))
    else:
        for k in range(K):
            eval_node(k)
    return out


def build_lq_approximation(
    problem: SwitchedProblem,
    traj: Trajectory,
    num_threads: int = 1,
    compiled: bool | None = None,
) -> LqApproximation:
    """LQ data at every rollout node of every mode in the trajectory.

    Uses the problem's family kernels when present (already regularized
    by construction), otherwise the per-node Python path.  The result is
    bitwise independent of ``num_threads``: node evaluations are pure and
    assembled in node order.
    """
    from ._jit import resolve_engine

    use_kernels = problem.kernels is not None
    use_compiled = resolve_engine(compiled) and use_kernels

    modes = []
    for seg in traj.segments:
        sid = problem.schedule.subsystem_ids[seg.mode]
        sub = problem.subsystems[sid]
        cost = problem.costs[sid]

        if use_kernels:
            fill = problem.kernels.lq_fill.get(use_compiled)
            params = problem.kernels.mode_params[seg.mode]
            A, B, C, D, e, F, h, P, Q, q_vec, r, R, stage = fill(
                seg.times, seg.states, seg.inputs, params
            )
        else:
            try:
                data = _fill_mode_python(problem, seg, sub, cost, num_threads)
            except (NonFiniteJacobian, NonFiniteDerivative) as exc:
                raise type(exc)(f"mode {seg.mode}: {exc}") from exc
            A, B, C, D = data["A"], data["B"], data["C"], data["D"]
            e, F, h, P = data["e"], data["F"], data["h"], data["P"]
            Q, q_vec, r, R = data["Q"], data["q_vec"], data["r"], data["R"]
            stage = data["stage"]

        terminal = quadratize_terminal(cost.terminal, seg.states[-1])
        if seg.mode == problem.schedule.num_modes - 1 and problem.terminal_cost is not None:
            terminal = merge_terminals(
                terminal, quadratize_terminal(problem.terminal_cost, seg.states[-1])
            )
        modes.append(
            ModeLqData(
                mode=seg.mode,
                times=seg.times,
                A=A,
                B=B,
                C=C,
                D=D,
                e=e,
                F=F,
                h=h,
                P=P,
                Q=Q,
                q_vec=q_vec,
                r=r,
                R=R,
                stage=stage,
                terminal=terminal,
            )
        )
    return LqApproximation(tuple(modes), problem.state_dim, problem.input_dim)


def interpolate_lq(approx: LqApproximation, t: float) -> LqNode:
    """Componentwise linear interpolation of the LQ data at time ``t``.

    Exact at nodes; at a switching time the later mode wins, matching the
    half-open mode convention.
    """
    if t < approx.t_start - 1e-9 or t > approx.t_end + 1e-9:
        raise OutOfSpan(f"t={t!r} outside LQ span [{approx.t_start}, {approx.t_end}]")
    starts = [md.times[0] for md in approx.modes]
    idx = int(np.searchsorted(np.asarray(starts), t, side="right")) - 1
    idx = min(max(idx, 0), len(approx.modes) - 1)
    md = approx.modes[idx]
    tc = min(max(t, float(md.times[0])), float(md.times[-1]))
    j = int(np.searchsorted(md.times, tc, side="right")) - 1
    j = min(max(j, 0), md.times.size - 2)
    dt = md.times[j + 1] - md.times[j]
    w = 0.0 if dt <= 0.0 else (tc - md.times[j]) / dt

    def lerp(arr):
        return (1.0 - w) * arr[j] + w * arr[j + 1]

    return LqNode(
        t=float(tc),
        A=lerp(md.A),
        B=lerp(md.B),
        C=lerp(md.C),
        D=lerp(md.D),
        e=lerp(md.e),
        F=lerp(md.F),
        h=lerp(md.h),
        q=float(lerp(md.stage)),
        q_vec=lerp(md.q_vec),
        r=lerp(md.r),
        P=lerp(md.P),
        Q=lerp(md.Q),
        R=lerp(md.R),
    )
