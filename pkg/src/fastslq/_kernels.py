"""Shared hot kernels, written once in numba-compatible numpy style.

Every function here is wrapped in :class:`~fastslq._jit.JitKernel`: the
solver obtains either the compiled twin or the plain function depending
on the selected engine, so both engines execute identical arithmetic.

Kernels take positional arguments, touch nothing but numpy arrays,
scalars and tuples, and report failures through integer status codes
instead of exceptions; callers translate codes into typed errors.  Each
kernel is self-contained (no cross-kernel calls), so small idioms like
the bracketing search appear inlined in several places on purpose.

The adaptive integrator is a Dormand-Prince 5(4) pair with PI step-size
control and first-same-as-last reuse.  Backward spans are handled by
time reversal inside the core (positive internal steps over a reversed
clock), never by negative step sizes.
"""

from __future__ import annotations

import numpy as np

from ._jit import kernel

# Integrator status codes.
INT_OK = 0
INT_UNDERFLOW = 1
INT_MAX_STEPS = 2
INT_NONFINITE = 3
INT_DIVERGED = 4

# Constraint-projection status codes.
PROJ_OK = 0
PROJ_RANK_DEFICIENT = 1

# Dormand-Prince 5(4) tableau.
_C2 = 1.0 / 5.0
_C3 = 3.0 / 10.0
_C4 = 4.0 / 5.0
_C5 = 8.0 / 9.0

_A21 = 1.0 / 5.0
_A31 = 3.0 / 40.0
_A32 = 9.0 / 40.0
_A41 = 44.0 / 45.0
_A42 = -56.0 / 15.0
_A43 = 32.0 / 9.0
_A51 = 19372.0 / 6561.0
_A52 = -25360.0 / 2187.0
_A53 = 64448.0 / 6561.0
_A54 = -212.0 / 729.0
_A61 = 9017.0 / 3168.0
_A62 = -355.0 / 33.0
_A63 = 46732.0 / 5247.0
_A64 = 49.0 / 176.0
_A65 = -5103.0 / 18656.0

_B1 = 35.0 / 384.0
_B3 = 500.0 / 1113.0
_B4 = 125.0 / 192.0
_B5 = -2187.0 / 6784.0
_B6 = 11.0 / 84.0

_E1 = 71.0 / 57600.0
_E3 = -71.0 / 16695.0
_E4 = 71.0 / 1920.0
_E5 = -17253.0 / 339200.0
_E6 = 22.0 / 525.0
_E7 = -1.0 / 40.0

# PI controller: h *= safety * err^-ALPHA * err_prev^BETA, clamped.
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0
_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 5.0


@kernel()
def bracket(times, t):
    """Index j with times[j] <= t <= times[j+1] plus the blend weight.

    ``times`` must be ascending with at least two nodes.  ``t`` outside
    the span lands on the boundary segment with a weight outside [0, 1];
    callers clamp when extrapolation is not wanted.
    """
    k = np.searchsorted(times, t)
    if k <= 0:
        j = 0
    elif k >= times.shape[0]:
        j = times.shape[0] - 2
    else:
        j = k - 1
    dt = times[j + 1] - times[j]
    if dt <= 0.0:
        return j, 0.0
    return j, (t - times[j]) / dt


@kernel()
def hermite_point(times, ys, fs, t):
    """Cubic Hermite interpolation through nodes with stored derivatives.

    Exact at the nodes: a node hit returns a copy of the stored row.
    """
    k = np.searchsorted(times, t)
    if k <= 0:
        j = 0
    elif k >= times.shape[0]:
        j = times.shape[0] - 2
    else:
        j = k - 1
    h = times[j + 1] - times[j]
    if h <= 0.0:
        return ys[j].copy()
    w = (t - times[j]) / h
    if w == 0.0:
        return ys[j].copy()
    if w == 1.0:
        return ys[j + 1].copy()
    w2 = w * w
    w3 = w2 * w
    b00 = 2.0 * w3 - 3.0 * w2 + 1.0
    b10 = w3 - 2.0 * w2 + w
    b01 = -2.0 * w3 + 3.0 * w2
    b11 = w3 - w2
    return b00 * ys[j] + (b10 * h) * fs[j] + b01 * ys[j + 1] + (b11 * h) * fs[j + 1]


@kernel()
def hermite_midpoints(times, ys, fs):
    """Interpolated state at every step midpoint of an integration grid."""
    num = times.shape[0] - 1
    d = ys.shape[1]
    mids = np.empty((num, d))
    for j in range(num):
        h = times[j + 1] - times[j]
        for i in range(d):
            mids[j, i] = 0.5 * (ys[j, i] + ys[j + 1, i]) + 0.125 * h * (fs[j, i] - fs[j + 1, i])
    return mids


@kernel(nogil=True)
def hermite_batch(times, ys, fs, qtimes):
    """Hermite-interpolated rows at each query time (clamped to span)."""
    J = qtimes.shape[0]
    d = ys.shape[1]
    out = np.empty((J, d))
    lo = times[0]
    hi = times[times.shape[0] - 1]
    for idx in range(J):
        t = qtimes[idx]
        if t < lo:
            t = lo
        elif t > hi:
            t = hi
        k = np.searchsorted(times, t)
        if k <= 0:
            j = 0
        elif k >= times.shape[0]:
            j = times.shape[0] - 2
        else:
            j = k - 1
        h = times[j + 1] - times[j]
        w = 0.0 if h <= 0.0 else (t - times[j]) / h
        w2 = w * w
        w3 = w2 * w
        b00 = 2.0 * w3 - 3.0 * w2 + 1.0
        b10 = w3 - 2.0 * w2 + w
        b01 = -2.0 * w3 + 3.0 * w2
        b11 = w3 - w2
        for i in range(d):
            out[idx, i] = (
                b00 * ys[j, i] + b10 * h * fs[j, i] + b01 * ys[j + 1, i] + b11 * h * fs[j + 1, i]
            )
    return out


@kernel(nogil=True)
def input_interp_batch(times, us, umids, qtimes):
    """Node-plus-midpoint quadratic input interpolation at query times.

    Falls back to linear interpolation when ``umids`` has no rows.
    """
    J = qtimes.shape[0]
    m = us.shape[1]
    out = np.empty((J, m))
    lo = times[0]
    hi = times[times.shape[0] - 1]
    quad = umids.shape[0] == times.shape[0] - 1
    for idx in range(J):
        t = qtimes[idx]
        if t < lo:
            t = lo
        elif t > hi:
            t = hi
        k = np.searchsorted(times, t)
        if k <= 0:
            j = 0
        elif k >= times.shape[0]:
            j = times.shape[0] - 2
        else:
            j = k - 1
        h = times[j + 1] - times[j]
        w = 0.0 if h <= 0.0 else (t - times[j]) / h
        if quad:
            b0 = (2.0 * w - 1.0) * (w - 1.0)
            bm = 4.0 * w * (1.0 - w)
            b1 = w * (2.0 * w - 1.0)
            for i in range(m):
                out[idx, i] = b0 * us[j, i] + bm * umids[j, i] + b1 * us[j + 1, i]
        else:
            for i in range(m):
                out[idx, i] = (1.0 - w) * us[j, i] + w * us[j + 1, i]
    return out


@kernel()
def policy_input(ptimes, puff, pgain, t, x):
    """Affine policy evaluation u = uff(t) + K(t) x with clamped interp."""
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
    return uff + gain @ x


@kernel(nogil=True)
def dopri5(rhs, p, t0, t1, y0, rel_tol, abs_tol, max_step, min_step, max_steps, norm_cap):
    """Adaptive Dormand-Prince 5(4) integration of dy/dt = rhs(t, y, p).

    Returns ``(times, ys, fs, status, attempts)`` where rows are accepted
    nodes in integration order (t0 first, t1 last on success) and ``fs``
    holds the physical derivative at each node.  ``norm_cap`` aborts with
    ``INT_DIVERGED`` once ``max|y|`` exceeds it.
    """
    d = y0.shape[0]
    span = abs(t1 - t0)
    sgn = 1.0 if t1 >= t0 else -1.0

    cap = 128
    ts = np.empty(cap)
    ys = np.empty((cap, d))
    fs = np.empty((cap, d))

    y = y0.copy()
    f0 = rhs(t0, y, p)
    ts[0] = t0
    ys[0] = y
    fs[0] = f0
    count = 1

    ok = True
    for i in range(d):
        if not np.isfinite(f0[i]):
            ok = False
    if not ok:
        return ts[:1].copy(), ys[:1].copy(), fs[:1].copy(), INT_NONFINITE, 0
    if span == 0.0:
        return ts[:1].copy(), ys[:1].copy(), fs[:1].copy(), INT_OK, 0

    # Initial step from the scaled magnitudes of y and f.
    d0 = 0.0
    d1 = 0.0
    for i in range(d):
        sc = abs_tol + rel_tol * abs(y[i])
        d0 += (y[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = np.sqrt(d0 / d)
    d1 = np.sqrt(d1 / d)
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-3 * span
    else:
        h = 0.01 * d0 / d1
    if h > max_step:
        h = max_step
    if h > span:
        h = span

    k1 = sgn * f0
    s = 0.0
    err_prev = 1e-4
    attempts = 0
    status = INT_OK

    while s < span:
        if attempts >= max_steps:
            status = INT_MAX_STEPS
            break
        attempts += 1

        last = False
        if h >= span - s:
            h = span - s
            last = True
        elif h < min_step:
            status = INT_UNDERFLOW
            break

        t_base = t0 + sgn * s
        y2 = y + (h * _A21) * k1
        k2 = sgn * rhs(t_base + sgn * (_C2 * h), y2, p)
        y3 = y + h * (_A31 * k1 + _A32 * k2)
        k3 = sgn * rhs(t_base + sgn * (_C3 * h), y3, p)
        y4 = y + h * (_A41 * k1 + _A42 * k2 + _A43 * k3)
        k4 = sgn * rhs(t_base + sgn * (_C4 * h), y4, p)
        y5 = y + h * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4)
        k5 = sgn * rhs(t_base + sgn * (_C5 * h), y5, p)
        y6 = y + h * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5)
        k6 = sgn * rhs(t_base + sgn * h, y6, p)
        ynew = y + h * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        tnew = t_base + sgn * h
        k7 = sgn * rhs(tnew, ynew, p)

        err = 0.0
        finite = True
        for i in range(d):
            ei = h * (
                _E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i] + _E6 * k6[i] + _E7 * k7[i]
            )
            ay = abs(y[i])
            an = abs(ynew[i])
            big = ay if ay > an else an
            sc = abs_tol + rel_tol * big
            err += (ei / sc) ** 2
            if not np.isfinite(ynew[i]):
                finite = False
        err = np.sqrt(err / d)
        if not finite or not np.isfinite(err):
            err = 1e10

        if err <= 1.0:
            s += h
            y = ynew
            k1 = k7
            if count == cap:
                cap *= 2
                ts2 = np.empty(cap)
                ys2 = np.empty((cap, d))
                fs2 = np.empty((cap, d))
                ts2[:count] = ts[:count]
                ys2[:count] = ys[:count]
                fs2[:count] = fs[:count]
                ts = ts2
                ys = ys2
                fs = fs2
            if last or s >= span:
                ts[count] = t1
            else:
                ts[count] = t0 + sgn * s
            ys[count] = y
            fs[count] = sgn * k7
            count += 1

            big = 0.0
            for i in range(d):
                ai = abs(y[i])
                if ai > big:
                    big = ai
            if big > norm_cap:
                status = INT_DIVERGED
                break

            if err == 0.0:
                fac = _FAC_MAX
            else:
                fac = _SAFETY * err ** (-_PI_ALPHA) * err_prev**_PI_BETA
                if fac > _FAC_MAX:
                    fac = _FAC_MAX
                elif fac < _FAC_MIN:
                    fac = _FAC_MIN
            h = h * fac
            if h > max_step:
                h = max_step
            err_prev = err if err > 1e-10 else 1e-10
        else:
            fac = _SAFETY * err ** (-0.2)
            if fac < _FAC_MIN:
                fac = _FAC_MIN
            h = h * fac

    return ts[:count].copy(), ys[:count].copy(), fs[:count].copy(), status, attempts


@kernel(nogil=True)
def project_lq_nodes(A, B, C, D, e, F, h, P, Q, q, r, R, rho):
    """Project one mode's LQ nodes onto the input-equality constraints.

    Inputs are stacked per node: A (K,n,n), B (K,n,m), C (K,c1,n),
    D (K,c1,m), e (K,c1), F (K,c2,n), h (K,c2), P (K,n,m), Q (K,n,n),
    q (K,n), r (K,m), R (K,m,m).  State-only rows enter the projected
    state weights through the penalty ``rho``.

    Returns ``(status, bad_node, Ap, Dpinv, Cp, Dp, ep, Rinv, Qp, qp,
    Rp, w, cre, ew)`` where suffix ``p`` marks constraint-projected
    quantities, ``w`` is the input-metric image of the restoration
    offset, ``cre`` its pullback to the state and ``ew`` its scalar
    half-norm; all three feed the restoration column and the value
    offset of the backward sweep.
    """
    K = Q.shape[0]
    n = Q.shape[1]
    m = R.shape[1]
    c1 = D.shape[1]
    c2 = F.shape[1]

    Ap = np.empty((K, n, n))
    Dpinv = np.zeros((K, m, c1))
    Cp = np.zeros((K, m, n))
    Dp = np.zeros((K, m, m))
    ep = np.zeros((K, m))
    Rinv = np.empty((K, m, m))
    Qp = np.empty((K, n, n))
    qp = np.empty((K, n))
    Rp = np.empty((K, m, m))
    w = np.zeros((K, m))
    cre = np.zeros((K, n))
    ew = np.zeros(K)

    eye_m = np.eye(m)
    status = PROJ_OK
    bad = -1

    for kn in range(K):
        Rk = 0.5 * (R[kn] + R[kn].T)
        Rik = np.linalg.inv(Rk)
        Rik = 0.5 * (Rik + Rik.T)
        Rinv[kn] = Rik

        if c1 > 0:
            Dk = D[kn]
            G = Dk @ Rik @ Dk.T
            G = 0.5 * (G + G.T)
            lam = np.linalg.eigvalsh(G)
            lmin = lam[0]
            lmax = lam[c1 - 1]
            if lmax <= 0.0 or lmin <= 1e-12 * lmax:
                tr = 0.0
                for i in range(c1):
                    tr += G[i, i]
                shift = 1e-10 * max(tr / c1, 1.0)
                G = G + shift * np.eye(c1)
                lam = np.linalg.eigvalsh(G)
                lmin = lam[0]
                lmax = lam[c1 - 1]
                if lmax <= 0.0 or lmin <= 1e-12 * lmax:
                    status = PROJ_RANK_DEFICIENT
                    bad = kn
                    break
            Dpi = Rik @ Dk.T @ np.linalg.inv(G)
            Cpk = Dpi @ C[kn]
            epk = Dpi @ e[kn]
            Dpinv[kn] = Dpi
            Cp[kn] = Cpk
            Dp[kn] = Dpi @ Dk
            ep[kn] = epk
            Ap[kn] = A[kn] - B[kn] @ Cpk
            wk = Rk @ epk
            w[kn] = wk
            cre[kn] = Cpk.T @ wk
            ew[kn] = 0.5 * (epk @ wk)
            PC = P[kn] @ Cpk
            Qpk = Q[kn] + Cpk.T @ (Rk @ Cpk) - PC - PC.T
            qpk = q[kn] - Cpk.T @ r[kn]
        else:
            Ap[kn] = A[kn].copy()
            Qpk = Q[kn].copy()
            qpk = q[kn].copy()

        if c2 > 0:
            Fk = F[kn]
            Qpk = Qpk + rho * (Fk.T @ Fk)
            qpk = qpk + rho * (Fk.T @ h[kn])

        Qp[kn] = 0.5 * (Qpk + Qpk.T)
        qp[kn] = qpk
        IDp = eye_m - Dp[kn]
        Rp[kn] = IDp.T @ Rk @ IDp

    return status, bad, Ap, Dpinv, Cp, Dp, ep, Rinv, Qp, qp, Rp, w, cre, ew


@kernel(nogil=True)
def riccati_rhs(t, y, p):
    """Physical-time derivative of the packed value-function state.

    ``y`` packs the quadratic coefficient S (n*n, symmetrized on entry),
    the cost gradient s (n), the constraint-restoration gradient se (n)
    and the scalar offset s0 (1).  ``p`` carries the node grid plus the
    projected LQ arrays from :func:`project_lq_nodes`; every quantity is
    interpolated linearly between nodes.
    """
    times, Ap, B, Pm, Rinv, r, Rp, Qp, qp, qs, wv, cre, ew = p
    n = Ap.shape[1]

    k = np.searchsorted(times, t)
    if k <= 0:
        j = 0
    elif k >= times.shape[0]:
        j = times.shape[0] - 2
    else:
        j = k - 1
    dt = times[j + 1] - times[j]
    wt = 0.0 if dt <= 0.0 else (t - times[j]) / dt
    if wt < 0.0:
        wt = 0.0
    elif wt > 1.0:
        wt = 1.0
    om = 1.0 - wt

    A_t = om * Ap[j] + wt * Ap[j + 1]
    B_t = om * B[j] + wt * B[j + 1]
    P_t = om * Pm[j] + wt * Pm[j + 1]
    Ri_t = om * Rinv[j] + wt * Rinv[j + 1]
    r_t = om * r[j] + wt * r[j + 1]
    Rp_t = om * Rp[j] + wt * Rp[j + 1]
    Qp_t = om * Qp[j] + wt * Qp[j + 1]
    qp_t = om * qp[j] + wt * qp[j + 1]
    q_t = om * qs[j] + wt * qs[j + 1]
    w_t = om * wv[j] + wt * wv[j + 1]
    cre_t = om * cre[j] + wt * cre[j + 1]
    ew_t = om * ew[j] + wt * ew[j + 1]

    S = np.ascontiguousarray(y[: n * n]).reshape(n, n)
    S = 0.5 * (S + S.T)
    sv = y[n * n : n * n + n]
    se = y[n * n + n : n * n + 2 * n]

    Lt = Ri_t @ (P_t.T + B_t.T @ S)
    lt = Ri_t @ (r_t + B_t.T @ sv)
    lte = Ri_t @ (B_t.T @ se)

    RpLt = Rp_t @ Lt
    dS = A_t.T @ S + S @ A_t - Lt.T @ RpLt + Qp_t
    Rplt = Rp_t @ lt
    Rplte = Rp_t @ lte

    out = np.empty(y.shape[0])
    dSsym = -0.5 * (dS + dS.T)
    out[: n * n] = dSsym.reshape(n * n)
    out[n * n : n * n + n] = -(A_t.T @ sv - Lt.T @ Rplt + qp_t)
    out[n * n + n : n * n + 2 * n] = -(A_t.T @ se - Lt.T @ Rplte + cre_t - Lt.T @ w_t)
    ltot = lt + lte
    out[n * n + 2 * n] = -(
        q_t - 0.5 * (ltot @ (Rp_t @ ltot)) - ltot @ w_t + ew_t
    )
    return out


@kernel(nogil=True)
def controller_stage(vtimes, vstates, ltimes, B, Pm, Rinv, r, Dp, Cp, ep):
    """Feedback gains and feedforwards at every value-function node.

    ``vstates`` rows pack (S, s, se, s0) as in :func:`riccati_rhs`; the
    LQ arrays are interpolated at each node time.  Returns stacked
    (gain, step_ff, restore_ff): the input update is
    u = ubar + alpha * step_ff + restore_ff + gain @ (x - xbar),
    assembled by the caller from gain and the nominal trajectory.
    """
    J = vtimes.shape[0]
    n = B.shape[1]
    m = B.shape[2]
    eye_m = np.eye(m)

    gain = np.empty((J, m, n))
    step_ff = np.empty((J, m))
    restore_ff = np.empty((J, m))

    for idx in range(J):
        t = vtimes[idx]
        k = np.searchsorted(ltimes, t)
        if k <= 0:
            j = 0
        elif k >= ltimes.shape[0]:
            j = ltimes.shape[0] - 2
        else:
            j = k - 1
        dt = ltimes[j + 1] - ltimes[j]
        wt = 0.0 if dt <= 0.0 else (t - ltimes[j]) / dt
        if wt < 0.0:
            wt = 0.0
        elif wt > 1.0:
            wt = 1.0
        om = 1.0 - wt

        B_t = om * B[j] + wt * B[j + 1]
        P_t = om * Pm[j] + wt * Pm[j + 1]
        Ri_t = om * Rinv[j] + wt * Rinv[j + 1]
        r_t = om * r[j] + wt * r[j + 1]
        Dp_t = om * Dp[j] + wt * Dp[j + 1]
        Cp_t = om * Cp[j] + wt * Cp[j + 1]
        ep_t = om * ep[j] + wt * ep[j + 1]

        y = vstates[idx]
        S = np.ascontiguousarray(y[: n * n]).reshape(n, n)
        S = 0.5 * (S + S.T)
        sv = y[n * n : n * n + n]
        se = y[n * n + n : n * n + 2 * n]

        Lt = Ri_t @ (P_t.T + B_t.T @ S)
        lt = Ri_t @ (r_t + B_t.T @ sv)
        lte = Ri_t @ (B_t.T @ se)

        IDp = eye_m - Dp_t
        gain[idx] = -(IDp @ Lt) - Cp_t
        step_ff[idx] = -(IDp @ lt)
        restore_ff[idx] = -(IDp @ lte) - ep_t

    return gain, step_ff, restore_ff
