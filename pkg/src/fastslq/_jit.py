"""Engine selection: numba-compiled kernels with a pure-numpy fallback.

Every hot kernel in this package is written once, in numba-compatible
numpy style, and wrapped in a :class:`JitKernel`.  The wrapper hands out
either the plain Python function or its ``numba.njit`` twin, so the
compiled path and the fallback path execute the same source.

The default engine is chosen at import time from the ``FASTSLQ_NUMBA``
environment variable:

* unset or ``auto``  - use numba when importable,
* ``1/true/on/yes``  - require numba (ImportError surfaces on first use),
* ``0/false/off/no`` - pure numpy, nothing is ever compiled.

Call sites may override per call; see ``SolverSettings.use_numba``.
"""

from __future__ import annotations

import os
from typing import Callable


def _probe_numba() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _env_choice() -> str:
    return os.environ.get("FASTSLQ_NUMBA", "auto").strip().lower()


HAVE_NUMBA = _probe_numba()

_TRUTHY = ("1", "true", "on", "yes")
_FALSY = ("0", "false", "off", "no")


def default_engine() -> bool:
    """True when the compiled engine is the process default."""
    choice = _env_choice()
    if choice in _FALSY:
        return False
    if choice in _TRUTHY:
        return True
    return HAVE_NUMBA


def resolve_engine(use_numba: bool | None) -> bool:
    """Resolve a per-call engine request against the process default."""
    if use_numba is None:
        return default_engine()
    return bool(use_numba) and (HAVE_NUMBA or _env_choice() in _TRUTHY)


class JitKernel:
    """A function plus its lazily compiled njit twin.

    The plain function is always available as ``.py_func``; ``.get(True)``
    compiles on first use and caches the dispatcher.  Kernels must take
    positional arguments only and touch nothing but numpy arrays, scalars
    and tuples, so both variants agree.
    """

    __slots__ = ("py_func", "_options", "_compiled")

    def __init__(self, py_func: Callable, **options):
        self.py_func = py_func
        self._options = options
        self._compiled = None

    @property
    def __name__(self) -> str:
        return self.py_func.__name__

    def get(self, compiled: bool) -> Callable:
        if not compiled:
            return self.py_func
        if self._compiled is None:
            from numba import njit

            self._compiled = njit(**self._options)(self.py_func)
        return self._compiled

    def __call__(self, *args):
        return self.get(default_engine())(*args)


def kernel(**options) -> Callable[[Callable], JitKernel]:
    """Decorator turning a function into a :class:`JitKernel`."""

    def wrap(fn: Callable) -> JitKernel:
        return JitKernel(fn, **options)

    return wrap
