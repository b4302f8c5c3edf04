"""Typed exceptions raised by the solver stack."""

from __future__ import annotations


class FastSlqError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(FastSlqError):
    """A configuration document or argument set is invalid."""


class DimensionMismatch(FastSlqError):
    """Array dimensions are inconsistent with the declared problem sizes."""


class OutOfHorizon(FastSlqError):
    """A query time lies outside the problem horizon."""


class OutOfSpan(FastSlqError):
    """A query time lies outside the span of a stored time-indexed object."""


class NonFiniteCost(FastSlqError):
    """Cost evaluation produced NaN or infinity."""


class NonFiniteJacobian(FastSlqError):
    """Dynamics or constraint linearization produced non-finite entries."""


class NonFiniteDerivative(FastSlqError):
    """Cost expansion produced non-finite entries."""


class IntegrationFailure(FastSlqError):
    """The adaptive integrator could not finish a span.

    Raised on step-size underflow, on exceeding the step budget, or when
    the right-hand side returns non-finite values.  The public
    :func:`integrate_adaptive` entry point raises the specific subclass;
    internal sweeps report the base class with context.
    """


class StepSizeUnderflow(IntegrationFailure):
    """Error control demanded a step below ``min_step``."""


class MaxStepsExceeded(IntegrationFailure):
    """The step-attempt budget ran out before reaching the end time."""


class NonFiniteRhs(IntegrationFailure):
    """The right-hand side returned NaN or infinity."""


class DivergentRollout(FastSlqError):
    """A closed-loop rollout left the trust region (state norm > 1e9)."""


class RiccatiBlowup(FastSlqError):
    """A backward value-function sweep diverged (matrix norm > 1e12)."""


class RankDeficientConstraint(FastSlqError):
    """The input-constraint rows are rank deficient in the input metric.

    The projected gram matrix stayed ill conditioned even after one
    Tikhonov retry, so the constrained LQ subproblem has no unique
    projection.
    """


class MaxIterationsReached(FastSlqError):
    """The iteration budget ran out before the cost settled.

    The solver itself reports this through the ``converged`` flag on its
    report (best-so-far results are still returned); the command line
    front end converts the flag into this error and exit status 2.
    """


class StepRejected(FastSlqError):
    """No line-search candidate passed the acceptance tests.

    In a parallel backward iteration this signals the driver to redo the
    iteration with a sequential sweep; in a sequential iteration it means
    the current nominal is a fixed point.
    """


class Unstabilizable(FastSlqError):
    """Terminal LQR design failed: the Riccati iteration did not settle."""
