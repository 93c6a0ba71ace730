"""Feasibility heuristic: exact presolve interleaved with one-at-a-time
fixing of a candidate integer assignment.

Each round runs the exact presolve, absorbs whatever it fixed, and only then
commits one more variable to its candidate value, so a wrong guess is used
only where the exact machinery could not decide.  The result is feasible
whenever the final all-integers-fixed QP solves.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import qp
from .bounds import BoundState
from .model import MiocpProblem, Trajectory, reduce as reduce_problem, InfeasibleBoundsError
from .presolve import PresolveOptions, presolve, probe_binary, _is_binary


@dataclass
class IntegerAssignment:
    """Candidate values for every integer variable, keyed by (stage, z-index)."""

    values: dict[tuple[int, int], int]
    source: str = "external"  # rounded-root | shifted | external

    def covers(self, problem: MiocpProblem) -> bool:
        return set(self.values) == set(problem.integer_coords())


@dataclass
class HeuristicOutcome:
    feasible: bool
    traj: Trajectory | None = None
    objective: float | None = None
    failed_step: int | None = None
    cause: str | None = None
    fixed_by_presolve: int = 0


@dataclass
class HeuristicOptions:
    step_nmax: int = 2            # presolve budget inside the fixing loop
    first_full: bool = True       # full-budget presolve on the first round
    probe_each: bool = True       # single-variable probing before committing
    time_limit: float = math.inf
    presolve: PresolveOptions = field(default_factory=PresolveOptions)
    ipm: qp.IpmOptions = field(default_factory=qp.IpmOptions)


def round_root(
    problem: MiocpProblem,
    relax_traj: Trajectory,
    bounds: BoundState | None = None,
) -> IntegerAssignment:
    """Round the relaxation's integer entries to the nearest integer.

    Exact halves round up; values are clipped into the current bounds.
    """
    bounds = bounds or BoundState.from_problem(problem)
    values: dict[tuple[int, int], int] = {}
    for (i, j) in problem.integer_coords():
        v = float(relax_traj.z[i][j])
        r = math.floor(v + 0.5)
        lo = int(math.ceil(bounds.z_lb[i][j] - 1e-9))
        hi = int(math.floor(bounds.z_ub[i][j] + 1e-9))
        values[(i, j)] = int(min(max(r, lo), hi))
    return IntegerAssignment(values, source="rounded-root")


def var_select_closest(
    free_vars: list[tuple[int, int]],
    relax_values: dict[tuple[int, int], float] | None,
) -> tuple[int, int]:
    """Free variable whose relaxed value is closest to an integer.

    Ties, and the no-relaxation case, fall back to stage-then-index order.
    """
    if not free_vars:
        raise ValueError("no free variables to select from")
    ordered = sorted(free_vars)
    if not relax_values:
        return ordered[0]

    def frac(coord):
        v = relax_values.get(coord)
        if v is None:
            return 0.5
        return abs(v - round(v))

    return min(ordered, key=lambda c: (frac(c), c))


def heuristic_presolve(
    problem: MiocpProblem,
    candidate: IntegerAssignment,
    options: HeuristicOptions | None = None,
    bounds: BoundState | None = None,
    relax_values: dict[tuple[int, int], float] | None = None,
) -> HeuristicOutcome:
    """Fix the candidate assignment one variable at a time, presolving between.

    Returns infeasible as soon as presolve detects a conflict; otherwise the
    continuous QP of the fully fixed problem decides.  When the wall-clock
    budget runs out, all remaining variables are fixed directly.
    """
    options = options or HeuristicOptions()
    t0 = time.perf_counter()
    state = bounds.clone() if bounds is not None else BoundState.from_problem(problem)
    int_coords = problem.integer_coords()
    n_delta = len(int_coords)
    fixed: set[tuple[int, int]] = set()
    fixed_by_presolve = 0

    def absorb() -> int:
        newly = 0
        for c in int_coords:
            if c not in fixed and state.is_fixed(c[0], c[1]):
                fixed.add(c)
                newly += 1
        return newly

    def clip_value(coord) -> float:
        i, j = coord
        v = float(candidate.values.get(coord, 0))
        return float(min(max(v, state.z_lb[i][j]), state.z_ub[i][j]))

    step = 0
    for step in range(max(n_delta, 1)):
        if time.perf_counter() - t0 > options.time_limit:
            for c in int_coords:
                if c not in fixed:
                    state.fix(c[0], c[1], clip_value(c))
                    fixed.add(c)
            break
        opts = options.presolve
        if not (options.first_full and step == 0):
            opts = PresolveOptions(
                eps=opts.eps,
                eps_max=opts.eps_max,
                n_max=options.step_nmax,
                n_probing=opts.n_probing,
                l_max=opts.l_max,
                probing_enabled=False,
            )
        res = presolve(problem, state, opts)
        fixed_by_presolve += absorb()
        if not res.feasible:
            return HeuristicOutcome(
                False, failed_step=step, cause="presolve", fixed_by_presolve=fixed_by_presolve
            )
        if len(fixed) == n_delta:
            break
        free = [c for c in int_coords if c not in fixed]
        coord = var_select_closest(free, relax_values)
        if options.probe_each and _is_binary(state, coord[0], coord[1], opts.eps):
            pres = probe_binary(problem, state, opts, only=coord)
            if not pres.feasible:
                return HeuristicOutcome(
                    False, failed_step=step, cause="probing", fixed_by_presolve=fixed_by_presolve
                )
            fixed_by_presolve += absorb()
        if coord not in fixed:
            state.fix(coord[0], coord[1], clip_value(coord))
            fixed.add(coord)

    for c in int_coords:
        if c not in fixed:
            state.fix(c[0], c[1], clip_value(c))
            fixed.add(c)

    try:
        relax = reduce_problem(problem, state)
    except InfeasibleBoundsError:
        return HeuristicOutcome(
            False, failed_step=step, cause="reduce", fixed_by_presolve=fixed_by_presolve
        )
    out = qp.solve_relaxation(relax, options=options.ipm)
    if out.status is not qp.QpStatus.OPTIMAL:
        return HeuristicOutcome(
            False, failed_step=n_delta, cause="qp", fixed_by_presolve=fixed_by_presolve
        )
    return HeuristicOutcome(
        True,
        traj=Trajectory(out.trajectory),
        objective=out.objective,
        fixed_by_presolve=fixed_by_presolve,
    )
