"""Adaptive ODE integration with dense output.

This wraps the Dormand-Prince 5(4) core from ``_kernels`` in a typed
interface: validated settings, a :class:`DenseTrajectory` supporting
continuous evaluation between the accepted nodes, and typed errors.

The same core drives every integration in the package: forward rollouts
of switched dynamics, backward value-function sweeps (by internal time
reversal, never negative steps) and the public :func:`integrate_adaptive`
entry point for plain user ODEs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._jit import JitKernel
from .errors import (
    IntegrationFailure,
    MaxStepsExceeded,
    NonFiniteRhs,
    OutOfSpan,
    StepSizeUnderflow,
)


@dataclass(frozen=True)
class IntegratorSettings:
    """Error-control parameters for the adaptive integrator.

    Attributes:
        rel_tol: Relative tolerance entering the mixed error norm.
        abs_tol: Absolute tolerance entering the mixed error norm.
        max_step: Largest step size in seconds.
        min_step: Smallest tolerated step size in seconds; the integrator
            fails with :class:`IntegrationFailure` if error control would
            force a smaller step (the final clamped step may be shorter).
        max_num_steps: Budget of step attempts, accepted plus rejected.
    """

    rel_tol: float = 1e-6
    abs_tol: float = 1e-6
    max_step: float = math.inf
    min_step: float = 1e-12
    max_num_steps: int = 1_000_000

    def __post_init__(self):
        if not (self.rel_tol > 0.0 and self.abs_tol > 0.0):
            raise ValueError("tolerances must be positive")
        if not (self.max_step > 0.0 and self.min_step > 0.0):
            raise ValueError("step bounds must be positive")
        if self.min_step > self.max_step:
            raise ValueError("min_step must not exceed max_step")
        if self.max_num_steps <= 0:
            raise ValueError("max_num_steps must be positive")


class DenseTrajectory:
    """Accepted integrator nodes plus C1 interpolation between them.

    Nodes are stored in integration order, so times are strictly
    increasing for a forward solve and strictly decreasing for a
    backward one.  Evaluation uses cubic Hermite interpolation through
    the stored states and derivatives (order 3) and is exact at nodes.
    """

    interpolation_order = 3

    def __init__(self, times: np.ndarray, states: np.ndarray, derivs: np.ndarray):
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=float)
        derivs = np.asarray(derivs, dtype=float)
        if times.ndim != 1 or states.shape != (times.size, states.shape[-1]):
            raise ValueError("times must be 1-D with one state row per node")
        if states.shape != derivs.shape:
            raise ValueError("states and derivs must have matching shapes")
        if times.size >= 2:
            steps = np.diff(times)
            if not (np.all(steps > 0.0) or np.all(steps < 0.0)):
                raise ValueError("node times must be strictly monotone")
        self._times = times
        self._states = states
        self._derivs = derivs
        if times.size >= 2 and times[1] < times[0]:
            self._asc_times = times[::-1]
            self._asc_states = states[::-1]
            self._asc_derivs = derivs[::-1]
        else:
            self._asc_times = times
            self._asc_states = states
            self._asc_derivs = derivs

    @property
    def times(self) -> np.ndarray:
        return self._times

    @property
    def states(self) -> np.ndarray:
        return self._states

    @property
    def derivs(self) -> np.ndarray:
        return self._derivs

    @property
    def t_start(self) -> float:
        return float(self._times[0])

    @property
    def t_end(self) -> float:
        return float(self._times[-1])

    def __len__(self) -> int:
        return self._times.size

    def state_at(self, t: float) -> np.ndarray:
        """Interpolated state at time ``t`` within the stored span.

        Queries up to 1e-9 beyond either end are clamped; anything
        further raises :class:`OutOfSpan`.
        """
        lo = self._asc_times[0]
        hi = self._asc_times[-1]
        t = float(t)
        if t < lo - 1e-9 or t > hi + 1e-9:
            raise OutOfSpan(f"t={t:.9g} outside trajectory span [{lo:.9g}, {hi:.9g}]")
        t = min(max(t, lo), hi)
        if self._asc_times.size == 1:
            return self._asc_states[0].copy()
        return _kernels.hermite_point.py_func(self._asc_times, self._asc_states, self._asc_derivs, t)

    def __call__(self, t: float) -> np.ndarray:
        return self.state_at(t)


def _status_message(status: int, attempts: int, t_reached: float) -> str:
    if status == _kernels.INT_UNDERFLOW:
        return f"step size underflow near t={t_reached:.6g}"
    if status == _kernels.INT_MAX_STEPS:
        return f"step budget exhausted after {attempts} attempts near t={t_reached:.6g}"
    if status == _kernels.INT_NONFINITE:
        return f"right-hand side returned non-finite values at t={t_reached:.6g}"
    if status == _kernels.INT_DIVERGED:
        return f"solution norm exceeded the divergence cap near t={t_reached:.6g}"
    return "unknown integrator failure"


def run_core(rhs, params, t0, t1, y0, settings: IntegratorSettings, norm_cap: float, compiled: bool):
    """Run the shared core and return ``(times, ys, fs, status, attempts)``.

    ``rhs`` may be a :class:`JitKernel` (resolved against ``compiled``)
    or any plain callable ``rhs(t, y, params)``, in which case the
    interpreted core is used regardless of the requested engine.
    """
    if isinstance(rhs, JitKernel):
        fn = rhs.get(compiled)
    else:
        fn = rhs
        compiled = False
    core = _kernels.dopri5.get(compiled)
    return core(
        fn,
        params,
        float(t0),
        float(t1),
        np.ascontiguousarray(y0, dtype=float),
        settings.rel_tol,
        settings.abs_tol,
        settings.max_step,
        settings.min_step,
        int(settings.max_num_steps),
        norm_cap,
    )


def integrate_adaptive(f, t0: float, t1: float, y0, settings: IntegratorSettings | None = None) -> DenseTrajectory:
    """Integrate ``dy/dt = f(t, y)`` from ``t0`` to ``t1`` adaptively.

    ``t1 < t0`` integrates backward.  Step sizes adapt to the mixed
    absolute/relative error norm, so smooth slow dynamics produce few
    nodes and sharp transients refine automatically.

    Args:
        f: Right-hand side callable ``f(t, y) -> dy`` returning an array.
        t0: Initial time.
        t1: Final time (may lie before ``t0``).
        y0: Initial state vector.
        settings: Optional :class:`IntegratorSettings`.

    Returns:
        A :class:`DenseTrajectory` whose last node lies exactly at ``t1``.

    Raises:
        StepSizeUnderflow: Error control demanded a step below ``min_step``.
        MaxStepsExceeded: The step budget ran out before reaching ``t1``.
        NonFiniteRhs: ``f`` returned NaN or infinity.
    """
    settings = settings or IntegratorSettings()

    def rhs(t, y, _p):
        return np.asarray(f(t, y), dtype=float)

    times, ys, fs, status, attempts = run_core(
        rhs, (), t0, t1, np.atleast_1d(np.asarray(y0, dtype=float)), settings, math.inf, False
    )
    if status != _kernels.INT_OK:
        cls = {
            _kernels.INT_UNDERFLOW: StepSizeUnderflow,
            _kernels.INT_MAX_STEPS: MaxStepsExceeded,
            _kernels.INT_NONFINITE: NonFiniteRhs,
        }.get(status, IntegrationFailure)
        raise cls(_status_message(status, attempts, float(times[-1])))
    return DenseTrajectory(times, ys, fs)
