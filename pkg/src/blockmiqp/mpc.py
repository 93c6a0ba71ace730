"""Receding-horizon layer: warm starts carried across steps and simulation.

Between consecutive solves the incumbent's branching path is shifted one
stage forward and replayed as a seed-node list, the previous integer
assignment is shifted to prime the fixing heuristic, and pseudo-costs are
shifted with a reliability discount.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bnb
from .heuristic import IntegerAssignment
from .model import MiocpProblem, Trajectory


@dataclass
class WarmStartPath:
    """Branch decisions from root to the incumbent leaf, in branching order."""

    decisions: list[tuple[int, int, str, float]] = field(default_factory=list)
    assignment: IntegerAssignment | None = None
    pseudocosts: bnb.PseudoCostTable | None = None


@dataclass
class DecayOptions:
    eta_decrement: int = 1


def shift_solution(prev: IntegerAssignment, problem: MiocpProblem) -> IntegerAssignment:
    """Shift the assignment one stage forward; the last stage repeats."""
    values: dict[tuple[int, int], int] = {}
    for (i, j) in problem.integer_coords():
        if (i + 1, j) in prev.values:
            values[(i, j)] = prev.values[(i + 1, j)]
        elif (i, j) in prev.values:
            values[(i, j)] = prev.values[(i, j)]
        else:
            values[(i, j)] = 0
    return IntegerAssignment(values, source="shifted")


def carry_pseudocosts(
    table: bnb.PseudoCostTable, decay: DecayOptions | None = None
) -> bnb.PseudoCostTable:
    """Shift pseudo-cost statistics one stage forward and discount reliability."""
    decay = decay or DecayOptions()
    out = bnb.PseudoCostTable(table.eta_rel)
    keys = set(table.phi_minus) | set(table.phi_plus) | set(table.eta_minus) | set(table.eta_plus)
    max_stage = max((k[0] for k in keys), default=0)
    for (stage, col) in keys:
        src = (stage + 1, col) if (stage + 1, col) in keys else None
        if stage == max_stage and src is None:
            src = (stage, col)       # final stage repeats its own statistics
        if src is None:
            continue
        out.phi_minus[(stage, col)] = table.phi_minus.get(src, 0.0)
        out.phi_plus[(stage, col)] = table.phi_plus.get(src, 0.0)
        out.eta_minus[(stage, col)] = max(table.eta_minus.get(src, 0) - decay.eta_decrement, 0)
        out.eta_plus[(stage, col)] = max(table.eta_plus.get(src, 0) - decay.eta_decrement, 0)
    return out


def propagate_tree(
    path: WarmStartPath,
    root_relax_values: dict[tuple[int, int], float],
    int_tol: float = 1e-6,
    pseudocosts: bnb.PseudoCostTable | None = None,
    min_reliability: int = 1,
) -> list[bnb.BnbNode]:
    """Shift the stored path one stage forward and emit seed nodes.

    Stage-0 decisions drop out; remaining stages decrement.  Decisions whose
    variable is already integral in the new root relaxation, or has no
    carried pseudo-cost information, are removed.  The emitted order follows
    the leaf-first rule: the full-path leaf, then the sibling at each level
    walking back to the root (both children of every path node get solved,
    the parents never do).
    """
    shifted: list[tuple[int, int, str, float]] = []
    for (stage, col, direction, value) in path.decisions:
        if stage == 0:
            continue
        var = (stage - 1, col)
        root_val = root_relax_values.get(var)
        if root_val is not None and abs(root_val - round(root_val)) <= int_tol:
            continue
        if pseudocosts is not None and min_reliability > 0:
            cminus, cplus = pseudocosts.counts(var)
            if min(cminus, cplus) < min_reliability:
                continue
        shifted.append((var[0], var[1], direction, value))
    if not shifted:
        return []

    def delta(decision):
        stage, col, direction, value = decision
        if direction == "down":
            return (stage, col, -math.inf, float(value))
        return (stage, col, float(value), math.inf)

    def flipped_delta(decision):
        stage, col, direction, value = decision
        if direction == "down":
            return (stage, col, float(value) + 1.0, math.inf)
        return (stage, col, -math.inf, float(value) - 1.0)

    seeds: list[bnb.BnbNode] = []
    full = [delta(d) for d in shifted]
    seeds.append(bnb.BnbNode(0, None, len(full), full, -math.inf))
    for k in range(len(shifted) - 1, -1, -1):
        deltas = [delta(d) for d in shifted[:k]] + [flipped_delta(shifted[k])]
        seeds.append(bnb.BnbNode(0, None, len(deltas), deltas, -math.inf))
    return seeds


@dataclass
class ControllerState:
    template: MiocpProblem
    options: bnb.BnbOptions
    last_result: bnb.MiqpResult | None = None
    path: WarmStartPath | None = None
    pseudocosts: bnb.PseudoCostTable | None = None
    warm_start_enabled: bool = True
    min_reliability: int = 1
    decay: DecayOptions = field(default_factory=DecayOptions)
    last_control: np.ndarray | None = None


def make_controller(
    template: MiocpProblem,
    options: bnb.BnbOptions | None = None,
    warm_start: bool = True,
) -> ControllerState:
    return ControllerState(
        template=template,
        options=options or bnb.BnbOptions(),
        warm_start_enabled=warm_start,
    )


def instantiate(template: MiocpProblem, x0_hat: np.ndarray) -> MiocpProblem:
    """Template with the stage-0 state pinned to the estimate."""
    nx0 = template.stages[0].nx
    if x0_hat.shape != (nx0,):
        raise ValueError(f"state estimate must have length {nx0}")
    from .model import StageData

    stages = list(template.stages)
    st0 = stages[0]
    lb = st0.z_lb.copy()
    ub = st0.z_ub.copy()
    lb[:nx0] = x0_hat
    ub[:nx0] = x0_hat
    stages[0] = StageData(
        nx=st0.nx, nu=st0.nu, nc=st0.nc, H=st0.H, q=st0.q, r=st0.r,
        C=st0.C, D=st0.D, z_lb=lb, z_ub=ub, c_lb=st0.c_lb, c_ub=st0.c_ub,
        int_idx=st0.int_idx, A=st0.A, B=st0.B, a=st0.a,
    )
    return MiocpProblem(N=template.N, stages=stages, name=template.name)


def mpc_step(state: ControllerState, x0_hat: np.ndarray) -> tuple[np.ndarray, bnb.MiqpResult]:
    """One receding-horizon solve; returns the first-stage control.

    Warm information flows in three channels: the shifted assignment primes
    the incumbent heuristic, the shifted path becomes the seed-node list,
    and shifted pseudo-costs steer branching.  On infeasibility the previous
    control is held and reported via the result status.
    """
    problem = instantiate(state.template, np.asarray(x0_hat, dtype=float))
    warm = None
    if state.warm_start_enabled and state.last_result is not None and state.path is not None:
        candidate = None
        if state.path.assignment is not None:
            candidate = shift_solution(state.path.assignment, problem)
        table = carry_pseudocosts(state.pseudocosts, state.decay) if state.pseudocosts else None

        def build_seeds(root_vals):
            return propagate_tree(
                state.path, root_vals, state.options.int_tol, table, state.min_reliability
            )

        warm = bnb.WarmStartInput(
            seed_nodes=[], pseudocosts=table, candidate=candidate, seed_builder=build_seeds
        )
    result = bnb.solve(problem, state.options, warm)

    if result.traj is not None:
        u0 = result.traj.z[0][problem.stages[0].nx :].copy()
        state.last_control = u0
    elif state.last_control is not None:
        u0 = state.last_control
    else:
        u0 = np.zeros(problem.stages[0].nu)

    state.last_result = result
    if result.traj is not None:
        assignment = IntegerAssignment(
            {
                c: int(round(result.traj.z[c[0]][c[1]]))
                for c in problem.integer_coords()
            },
            source="previous-step",
        )
        decisions = [(d[0], d[1], d[2], d[3]) for d in result.incumbent_path]
        state.path = WarmStartPath(decisions, assignment, result.pseudocosts)
    state.pseudocosts = result.pseudocosts
    return u0, result


@dataclass
class NoiseConfig:
    enabled: bool = True
    sigma: tuple[float, float, float, float] = (1e-2, 1e-3, 1e-2, 1e-3)


@dataclass
class SimulationLog:
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    controls: list[float] = field(default_factory=list)
    contact_left: list[float] = field(default_factory=list)
    contact_right: list[float] = field(default_factory=list)
    mpc_index: list[int] = field(default_factory=list)      # plant step of each solve
    nodes: list[int] = field(default_factory=list)
    qp_iterations: list[int] = field(default_factory=list)
    objectives: list[float | None] = field(default_factory=list)
    statuses: list[str] = field(default_factory=list)

    def as_table(self) -> str:
        lines = ["time px_or_pc x2 x3 x4 control F_left F_right"]
        for k in range(len(self.times)):
            x = self.states[k]
            lines.append(
                f"{self.times[k]:.3f} "
                + " ".join(f"{v: .6f}" for v in x)
                + f" {self.controls[k]: .6f} {self.contact_left[k]: .6f} {self.contact_right[k]: .6f}"
            )
        return "\n".join(lines)


def closed_loop(
    plant,
    controller: ControllerState,
    x0: np.ndarray,
    steps: int,
    noise: NoiseConfig | None = None,
    seed: int = 0,
    mpc_every: int = 2,
) -> SimulationLog:
    """Simulate the plant under zero-order-held receding-horizon control.

    The plant advances at its fine step; the controller runs every
    ``mpc_every`` plant steps on a (possibly noisy) measurement.  Solver
    failures hold the previous control and are recorded, never raised.
    """
    noise = noise or NoiseConfig(enabled=False)
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=float).copy()
    log = SimulationLog()
    u_hold = 0.0
    for k in range(steps):
        if k % mpc_every == 0:
            meas = x.copy()
            if noise.enabled:
                meas = meas + rng.normal(0.0, np.asarray(noise.sigma))
            u0, result = mpc_step(controller, meas)
            if result.traj is not None:
                u_hold = float(u0[0])
            log.mpc_index.append(k)
            log.nodes.append(result.stats.nodes)
            log.qp_iterations.append(result.stats.qp_iterations)
            log.objectives.append(result.objective)
            log.statuses.append(result.status.value)
        x_next, f_l, f_r = plant.step(x, u_hold)
        log.times.append(k * plant.ts)
        log.states.append(x.copy())
        log.controls.append(u_hold)
        log.contact_left.append(f_l)
        log.contact_right.append(f_r)
        x = x_next
    return log
