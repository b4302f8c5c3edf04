"""Partition/thread scaling benchmark on single MPC-style iterations.

For each (partitions, threads) cell the harness builds a planar trot
problem whose horizon has that many modes, warm-starts it (one
sequential bootstrap iteration from the reference-input policy), then
times repeated single solver iterations from the same warm snapshot.
One thread means the sequential backward sweep; more threads run the
partition-parallel sweep with that worker count.  Warm-up repeats are
excluded from the statistics, and cells run strictly one after another
so they never contend with each other.
"""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ._jit import HAVE_NUMBA, resolve_engine
from .models import make_planar_trot_problem, reference_input_policy, trot_gait
from .problem import evaluate_cost
from .solver import SolverSettings, iterate_once, rollout

DEFAULT_REPEATS = 300
DEFAULT_WARMUP = 10


@dataclass(frozen=True)
class BenchCell:
    """Measured rates and phase shares of one benchmark configuration."""

    num_partitions: int
    num_threads: int
    engine: str
    mean_rate_hz: float
    std_rate_hz: float
    forward_ms: float
    lq_ms: float
    backward_ms: float
    repeats: int

    @property
    def mean_step_ms(self) -> float:
        return 1e3 / self.mean_rate_hz if self.mean_rate_hz > 0 else float("inf")


@dataclass
class BenchResult:
    """All cells of a benchmark run plus machine context."""

    cells: list = field(default_factory=list)
    machine: dict = field(default_factory=dict)

    def cell(self, num_partitions: int, num_threads: int, engine: str | None = None) -> BenchCell:
        for c in self.cells:
            if c.num_partitions == num_partitions and c.num_threads == num_threads:
                if engine is None or c.engine == engine:
                    return c
        raise KeyError(f"no cell for partitions={num_partitions}, threads={num_threads}")

    def table(self) -> str:
        """Plain-text rate table: rows partitions, columns threads."""
        lines = []
        engines = sorted({c.engine for c in self.cells})
        for engine in engines:
            cells = [c for c in self.cells if c.engine == engine]
            parts = sorted({c.num_partitions for c in cells})
            threads = sorted({c.num_threads for c in cells})
            lines.append(f"engine: {engine}  (MPC-style iteration rate, Hz)")
            header = "partitions " + "".join(f"{f'{th} thread':>16}" for th in threads)
            lines.append(header)
            for p in parts:
                row = f"{p:>10} "
                for th in threads:
                    try:
                        c = self.cell(p, th, engine)
                        row += f"{c.mean_rate_hz:>10.2f} ±{c.std_rate_hz:>4.1f}"
                    except KeyError:
                        row += f"{'-':>16}"
                lines.append(row)
            lines.append("")
        return "\n".join(lines).rstrip()

    def csv_rows(self) -> list:
        rows = [
            "num_partitions,num_threads,engine,mean_rate_hz,std_rate_hz,"
            "forward_ms,lq_ms,backward_ms,repeats"
        ]
        for c in self.cells:
            rows.append(
                f"{c.num_partitions},{c.num_threads},{c.engine},"
                f"{c.mean_rate_hz:.6g},{c.std_rate_hz:.6g},"
                f"{c.forward_ms:.6g},{c.lq_ms:.6g},{c.backward_ms:.6g},{c.repeats}"
            )
        return rows

    def to_dict(self) -> dict:
        return {
            "machine": self.machine,
            "cells": [
                {
                    "num_partitions": c.num_partitions,
                    "num_threads": c.num_threads,
                    "engine": c.engine,
                    "mean_rate_hz": c.mean_rate_hz,
                    "std_rate_hz": c.std_rate_hz,
                    "forward_ms": c.forward_ms,
                    "lq_ms": c.lq_ms,
                    "backward_ms": c.backward_ms,
                    "repeats": c.repeats,
                }
                for c in self.cells
            ],
        }


def _machine_info() -> dict:
    return {
        "cpu_count": os.cpu_count() or 1,
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numba_available": HAVE_NUMBA,
    }


def _warm_snapshot(problem, settings: SolverSettings, compiled: bool):
    """Nominal trajectory, cost and value functions after one bootstrap pass."""
    policy = reference_input_policy(problem)
    nominal = rollout(problem, policy, None, None, settings.integrator, compiled)
    cost = evaluate_cost(problem, nominal, compiled)
    boot = iterate_once(
        problem, nominal, cost, settings, None,
        problem.schedule.t_start, problem.x0, False, compiled,
    )
    vfs = {vf.mode: vf for vf in boot.value_functions}
    return boot.trajectory, boot.cost, vfs


def bench_cell(
    num_partitions: int,
    num_threads: int,
    repeats: int = DEFAULT_REPEATS,
    warmup: int = DEFAULT_WARMUP,
    engine: bool | None = None,
    base_settings: SolverSettings | None = None,
    problem=None,
) -> BenchCell:
    """Measure one (partitions, threads) configuration.

    A fresh warm snapshot is prepared once; each timed repeat performs a
    single full solver iteration (forward, LQ, backward, line search)
    from that snapshot, so every repeat does identical work.
    """
    if problem is None:
        problem = make_planar_trot_problem(gait=trot_gait(), num_modes=num_partitions)
    base = base_settings or SolverSettings()
    settings = replace(
        base,
        num_threads=num_threads,
        parallel_backward=num_threads > 1,
        use_numba=engine,
    )
    compiled = resolve_engine(engine) and problem.kernels is not None

    nominal, cost, vfs = _warm_snapshot(problem, settings, compiled)
    t0 = problem.schedule.t_start
    x0 = problem.x0

    def one_step():
        return iterate_once(
            problem, nominal, cost, settings, vfs, t0, x0,
            settings.parallel_backward, compiled,
        )

    for _ in range(warmup):
        one_step()

    times = np.empty(repeats)
    forward = np.empty(repeats)
    lq = np.empty(repeats)
    backward = np.empty(repeats)
    for i in range(repeats):
        tic = time.perf_counter()
        outcome = one_step()
        times[i] = time.perf_counter() - tic
        forward[i] = outcome.forward_s
        lq[i] = outcome.lq_s
        backward[i] = outcome.backward_s

    rates = 1.0 / times
    return BenchCell(
        num_partitions=num_partitions,
        num_threads=num_threads,
        engine="numba" if compiled else "numpy",
        mean_rate_hz=float(np.mean(rates)),
        std_rate_hz=float(np.std(rates)),
        forward_ms=1e3 * float(np.mean(forward)),
        lq_ms=1e3 * float(np.mean(lq)),
        backward_ms=1e3 * float(np.mean(backward)),
        repeats=repeats,
    )


def run_benchmark(
    partitions=(2, 4),
    threads=(1, 2, 4),
    repeats: int = DEFAULT_REPEATS,
    warmup: int = DEFAULT_WARMUP,
    engines=(None,),
    base_settings: SolverSettings | None = None,
) -> BenchResult:
    """Full grid of benchmark cells, run strictly sequentially."""
    if not partitions or not threads:
        raise ValueError("partitions and threads lists must be nonempty")
    result = BenchResult(machine=_machine_info())
    for engine in engines:
        for p in partitions:
            problem = make_planar_trot_problem(gait=trot_gait(), num_modes=int(p))
            for th in threads:
                result.cells.append(
                    bench_cell(
                        int(p),
                        int(th),
                        repeats=repeats,
                        warmup=warmup,
                        engine=engine,
                        base_settings=base_settings,
                        problem=problem,
                    )
                )
    return result
