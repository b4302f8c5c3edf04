"""Shared fixtures.

The suite pins the pure-numpy engine as the process default so unit
tests stay fast and deterministic; tests of the compiled engine opt in
explicitly (``use_numba=True`` or ``compiled=True``) and share the
session-scoped :func:`jit_stack` fixture, which pays the kernel
compilation cost exactly once.
"""

import os

os.environ["FASTSLQ_NUMBA"] = "0"

import numpy as np
import pytest

from fastslq.models import make_lti_problem, make_planar_trot_problem, trot_gait
from fastslq.problem import ModeSchedule
from fastslq.solver import SolverSettings, solve


def small_lti(horizon=1.0, x0=2.0):
    """Scalar integrator with unit weights, one mode."""
    return make_lti_problem(
        np.array([[0.0]]),
        np.array([[1.0]]),
        np.eye(1),
        np.eye(1),
        np.eye(1),
        np.array([float(x0)]),
        ModeSchedule((0.0, float(horizon)), (0,)),
    )


@pytest.fixture(scope="session")
def jit_stack():
    """Compile the full numba kernel stack once for the whole session."""
    solve(small_lti(), settings=SolverSettings(max_iterations=1, use_numba=True))
    planar = make_planar_trot_problem(gait=trot_gait(), num_modes=2)
    solve(planar, settings=SolverSettings(max_iterations=1, use_numba=True))
    return True
