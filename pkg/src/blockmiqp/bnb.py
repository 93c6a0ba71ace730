"""Branch-and-bound driver: hybrid node selection, reliability branching,
pruning against the incumbent, and early-terminated relaxation solves."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import heuristic as heur
from . import qp
from .bounds import BoundState
from .model import (
    InfeasibleBoundsError,
    MiocpProblem,
    Trajectory,
    feasibility_report,
    reduce as reduce_problem,
)
from .presolve import PresolveOptions, PresolveStats, presolve


@dataclass
class BnbOptions:
    int_tol: float = 1e-6
    gap_abs: float = 1e-6
    gap_rel: float = 1e-6
    max_nodes: int = 200_000
    time_limit: float = math.inf
    eta_rel: int = 2
    look_ahead: int = 4
    strong_branch_iters: int = 15
    strong_branch_tol: float = 1e-4   # scoring solves need little accuracy
    strong_candidates: int = 8        # strong-branched candidates per node
    presolve: str = "full"        # off | root | full
    probing: bool = True
    node_presolve_nmax: int = 3
    seed_heuristic: bool = True
    early_termination: bool = True
    most_infeasible: bool = False  # test baseline branching rule
    score_eps: float = 1e-6
    ipm: qp.IpmOptions = field(default_factory=qp.IpmOptions)
    presolve_opts: PresolveOptions = field(default_factory=PresolveOptions)
    heuristic_opts: heur.HeuristicOptions = field(default_factory=heur.HeuristicOptions)


@dataclass
class BnbNode:
    """One subproblem: bound deltas against the presolved root."""

    node_id: int
    parent: int | None
    depth: int
    delta_bounds: list[tuple[int, int, float, float]]
    lower_bound: float
    warm_start: list[np.ndarray] | None = None
    branch_var: tuple[int, int] | None = None
    branch_dir: str | None = None          # "down" | "up"
    branch_frac: float = 0.0
    order_hint: int = 0
    seeded: bool = False


class PseudoCostTable:
    """Per-variable average objective increase per unit of branching distance."""

    def __init__(self, eta_rel: int = 2):
        self.eta_rel = eta_rel
        self.phi_minus: dict[tuple[int, int], float] = {}
        self.phi_plus: dict[tuple[int, int], float] = {}
        self.eta_minus: dict[tuple[int, int], int] = {}
        self.eta_plus: dict[tuple[int, int], int] = {}

    def reliable(self, var: tuple[int, int]) -> bool:
        return (
            min(self.eta_minus.get(var, 0), self.eta_plus.get(var, 0)) >= self.eta_rel
        )

    def estimate(self, var, frac_down: float, frac_up: float) -> tuple[float, float]:
        return (
            self.phi_minus.get(var, 0.0) * frac_down,
            self.phi_plus.get(var, 0.0) * frac_up,
        )

    def counts(self, var) -> tuple[int, int]:
        return self.eta_minus.get(var, 0), self.eta_plus.get(var, 0)


def update_pseudocosts(
    table: PseudoCostTable,
    var: tuple[int, int],
    direction: str,
    objective_increase: float,
    fractional_distance: float,
) -> None:
    """Fold one observed increase-per-unit into the running average."""
    if fractional_distance <= 0:
        raise ValueError("fractional distance must be positive")
    ratio = max(objective_increase, 0.0) / fractional_distance
    if direction == "down":
        n = table.eta_minus.get(var, 0)
        cur = table.phi_minus.get(var, 0.0)
        table.phi_minus[var] = (cur * n + ratio) / (n + 1)
        table.eta_minus[var] = n + 1
    else:
        n = table.eta_plus.get(var, 0)
        cur = table.phi_plus.get(var, 0.0)
        table.phi_plus[var] = (cur * n + ratio) / (n + 1)
        table.eta_plus[var] = n + 1


def score(delta_minus: float, delta_plus: float, eps: float) -> float:
    """Product score of the two estimated objective increases."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return max(delta_plus, eps) * max(delta_minus, eps)


class MiqpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NODE_LIMIT = "node_limit"
    TIME_LIMIT = "time_limit"


@dataclass
class MiqpStats:
    nodes: int = 0
    qp_solves: int = 0
    qp_iterations: int = 0
    early_terminations: int = 0
    presolve_fixings: int = 0
    strong_branch_solves: int = 0
    heuristic_incumbents: int = 0
    unresolved_nodes: int = 0
    wall_time_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "nodes": self.nodes,
            "qp_solves": self.qp_solves,
            "qp_iterations": self.qp_iterations,
            "early_terminations": self.early_terminations,
            "presolve_fixings": self.presolve_fixings,
            "strong_branch_solves": self.strong_branch_solves,
            "heuristic_incumbents": self.heuristic_incumbents,
            "unresolved_nodes": self.unresolved_nodes,
            "wall_time_seconds": self.wall_time_seconds,
        }


@dataclass
class MiqpResult:
    status: MiqpStatus
    objective: float | None = None
    traj: Trajectory | None = None
    lower_bound: float = -math.inf
    stats: MiqpStats = field(default_factory=MiqpStats)
    incumbent_path: list[tuple[int, int, str, float, float]] = field(default_factory=list)
    pseudocosts: PseudoCostTable | None = None
    root_relax_values: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is MiqpStatus.OPTIMAL


@dataclass
class WarmStartInput:
    """Seeds handed to the solver by the receding-horizon layer.

    ``seed_builder`` runs after the root relaxation with the integer entries
    of its solution, so already-integral branching decisions can be dropped
    before the seed nodes are formed.
    """

    seed_nodes: list[BnbNode] = field(default_factory=list)
    pseudocosts: PseudoCostTable | None = None
    candidate: heur.IntegerAssignment | None = None
    seed_builder: "callable | None" = None


def select_node(open_set: list[BnbNode], has_incumbent: bool) -> int:
    """Index of the next node: depth-first (LIFO) until the first incumbent,
    best-bound afterwards (ties to the deeper, then earlier-created node)."""
    if not open_set:
        raise ValueError("open set is empty")
    if not has_incumbent:
        return max(range(len(open_set)), key=lambda k: (open_set[k].depth, open_set[k].order_hint))
    return min(
        range(len(open_set)),
        key=lambda k: (open_set[k].lower_bound, -open_set[k].depth, open_set[k].order_hint),
    )


def branch(node: BnbNode, var: tuple[int, int], value: float, next_id: int, int_tol: float = 1e-6):
    """Two children tightening the variable below/above the fractional value."""
    if abs(value - round(value)) <= int_tol:
        raise ValueError(f"branch value {value} is integral within tolerance")
    lo = math.floor(value)
    hi = math.ceil(value)
    down = BnbNode(
        node_id=next_id,
        parent=node.node_id,
        depth=node.depth + 1,
        delta_bounds=node.delta_bounds + [(var[0], var[1], -math.inf, float(lo))],
        lower_bound=node.lower_bound,
        warm_start=node.warm_start,
        branch_var=var,
        branch_dir="down",
        branch_frac=value - lo,
        order_hint=next_id,
    )
    up = BnbNode(
        node_id=next_id + 1,
        parent=node.node_id,
        depth=node.depth + 1,
        delta_bounds=node.delta_bounds + [(var[0], var[1], float(hi), math.inf)],
        lower_bound=node.lower_bound,
        warm_start=node.warm_start,
        branch_var=var,
        branch_dir="up",
        branch_frac=hi - value,
        order_hint=next_id + 1,
    )
    return down, up


def _fractional_vars(problem: MiocpProblem, traj: list[np.ndarray], tol: float):
    out = []
    for (i, j) in problem.integer_coords():
        v = float(traj[i][j])
        frac = abs(v - round(v))
        if frac > tol:
            out.append(((i, j), v))
    return out


def _apply_deltas(bounds: BoundState, deltas, eps: float) -> bool:
    """Intersect branching deltas into the bounds; False on contradiction."""
    for (stage, col, lo, hi) in deltas:
        new_lo = max(bounds.z_lb[stage][col], lo)
        new_hi = min(bounds.z_ub[stage][col], hi)
        if new_lo > new_hi + eps:
            return False
        if new_lo > new_hi:
            mid = 0.5 * (new_lo + new_hi)
            if bounds.int_mask[stage][col]:
                mid = round(mid)
            new_lo = new_hi = mid
        bounds.z_lb[stage][col] = new_lo
        bounds.z_ub[stage][col] = new_hi
    return True


def select_variable(
    problem: MiocpProblem,
    node_bounds: BoundState,
    fractional: list[tuple[tuple[int, int], float]],
    node_bound: float,
    table: PseudoCostTable,
    options: BnbOptions,
    stats: MiqpStats,
    upper_bound: float,
) -> tuple[tuple[int, int], float]:
    """Reliability branching: pseudo-cost scores, strong branching otherwise.

    The candidate scan stops after ``look_ahead`` consecutive non-improving
    scores.  Returns the chosen (stage, z-index) and its fractional value.
    """
    if not fractional:
        raise ValueError("no fractional variables")
    if len(fractional) == 1:
        return fractional[0]
    if options.most_infeasible:
        var, val = max(fractional, key=lambda it: min(it[1] - math.floor(it[1]), math.ceil(it[1]) - it[1]))
        return var, val

    best_var, best_val = fractional[0]
    best_score = -math.inf
    no_improve = 0
    strong_left = options.strong_candidates
    by_frac = sorted(
        fractional,
        key=lambda it: (-min(it[1] - math.floor(it[1]), math.ceil(it[1]) - it[1]), it[0]),
    )
    for var, val in by_frac:
        f_down = val - math.floor(val)
        f_up = math.ceil(val) - val
        if table.reliable(var) or strong_left <= 0:
            d_minus, d_plus = table.estimate(var, f_down, f_up)
        else:
            strong_left -= 1
            d_minus = _strong_branch(
                problem, node_bounds, var, val, "down", node_bound, table, options, stats, upper_bound
            )
            d_plus = _strong_branch(
                problem, node_bounds, var, val, "up", node_bound, table, options, stats, upper_bound
            )
        s = score(d_minus, d_plus, options.score_eps)
        if s > best_score:
            best_score = s
            best_var, best_val = var, val
            no_improve = 0
        else:
            no_improve += 1
            if no_improve >= options.look_ahead:
                break
    return best_var, best_val


def _strong_branch(
    problem, node_bounds, var, value, direction, node_bound, table, options, stats, upper_bound
) -> float:
    """Bounded-effort child solve; feeds the pseudo-cost table when clean."""
    child = node_bounds.clone()
    if direction == "down":
        child.z_ub[var[0]][var[1]] = math.floor(value)
        dist = value - math.floor(value)
    else:
        child.z_lb[var[0]][var[1]] = math.ceil(value)
        dist = math.ceil(value) - value
    stats.strong_branch_solves += 1
    try:
        relax = reduce_problem(problem, child)
    except InfeasibleBoundsError:
        return 1e12
    ipm = qp.IpmOptions(
        **{
            **options.ipm.__dict__,
            "max_iters": options.strong_branch_iters,
            "tol": max(options.ipm.tol, options.strong_branch_tol),
            "comp_polish": 1.0,
        }
    )
    out = qp.solve_relaxation(relax, upper_bound=upper_bound, options=ipm)
    stats.qp_solves += 1
    stats.qp_iterations += out.stats.iterations
    if out.status is qp.QpStatus.INFEASIBLE:
        return 1e12
    if out.status is qp.QpStatus.OPTIMAL:
        delta = max(out.objective - node_bound, 0.0)
    elif out.status is qp.QpStatus.EARLY_TERMINATED:
        delta = max(out.dual_bound - node_bound, 0.0)
    elif out.iterate is not None:
        delta = max(relax.primal_objective(out.iterate.z) - node_bound, 0.0)
    else:
        return 0.0
    update_pseudocosts(table, var, direction, delta, max(dist, 1e-12))
    return delta


def solve(
    problem: MiocpProblem,
    options: BnbOptions | None = None,
    warm: WarmStartInput | None = None,
) -> MiqpResult:
    """Solve the MIQP by branch-and-bound over presolved, reduced relaxations."""
    options = options or BnbOptions()
    t0 = time.perf_counter()
    stats = MiqpStats()
    table = (warm.pseudocosts if warm and warm.pseudocosts else PseudoCostTable(options.eta_rel))
    table.eta_rel = options.eta_rel

    def finish(status, objective=None, traj=None, lower=None, path=(), root_vals=None):
        stats.wall_time_seconds = time.perf_counter() - t0
        return MiqpResult(
            status,
            objective=objective,
            traj=traj,
            lower_bound=(lower if lower is not None else (objective if objective is not None else -math.inf)),
            stats=stats,
            incumbent_path=list(path),
            pseudocosts=table,
            root_relax_values=root_vals or {},
        )

    # root presolve
    root_bounds = BoundState.from_problem(problem)
    if options.presolve != "off":
        popts = options.presolve_opts
        popts = PresolveOptions(
            eps=popts.eps,
            eps_max=popts.eps_max,
            n_max=popts.n_max,
            n_probing=popts.n_probing,
            l_max=popts.l_max,
            probing_enabled=options.probing and popts.probing_enabled,
        )
        pres = presolve(problem, root_bounds, popts)
        stats.presolve_fixings += pres.stats.variables_fixed
        if not pres.feasible:
            return finish(MiqpStatus.INFEASIBLE)

    # root relaxation
    try:
        root_relax = reduce_problem(problem, root_bounds)
    except InfeasibleBoundsError:
        return finish(MiqpStatus.INFEASIBLE)
    root_out = qp.solve_relaxation(root_relax, options=options.ipm)
    stats.qp_solves += 1
    stats.qp_iterations += root_out.stats.iterations
    if root_out.status is qp.QpStatus.ITERATION_LIMIT:
        retry = qp.IpmOptions(**{**options.ipm.__dict__, "max_iters": 2000})
        root_out = qp.solve_relaxation(root_relax, options=retry)
        stats.qp_solves += 1
        stats.qp_iterations += root_out.stats.iterations
    if root_out.status is qp.QpStatus.INFEASIBLE:
        return finish(MiqpStatus.INFEASIBLE)
    if root_out.status is not qp.QpStatus.OPTIMAL:
        stats.unresolved_nodes += 1
        return finish(MiqpStatus.NODE_LIMIT)
    root_bound = root_out.objective
    root_vals = {
        c: float(root_out.trajectory[c[0]][c[1]]) for c in problem.integer_coords()
    }

    incumbent: Trajectory | None = None
    incumbent_obj = math.inf
    incumbent_path: list = []

    fractional = _fractional_vars(problem, root_out.trajectory, options.int_tol)
    if not fractional:
        traj = Trajectory(root_out.trajectory)
        return finish(MiqpStatus.OPTIMAL, root_bound, traj, root_bound, root_vals=root_vals)

    # incumbent seeding: candidate assignment through the fixing heuristic
    if options.seed_heuristic:
        candidate = warm.candidate if warm and warm.candidate else None
        if candidate is None or not candidate.covers(problem):
            candidate = heur.round_root(problem, Trajectory(root_out.trajectory), root_bounds)
        hout = heur.heuristic_presolve(
            problem, candidate, options.heuristic_opts, bounds=root_bounds, relax_values=root_vals
        )
        if hout.feasible:
            incumbent = hout.traj
            incumbent_obj = hout.objective
            stats.heuristic_incumbents += 1

    def gap_for(ub):
        return options.gap_abs + options.gap_rel * abs(ub)

    root_node = BnbNode(0, None, 0, [], root_bound, warm_start=root_out.trajectory)
    node_counter = 1
    open_set: list[BnbNode] = []
    seed_queue: list[BnbNode] = list(warm.seed_nodes) if warm else []
    if warm is not None and warm.seed_builder is not None:
        seed_queue.extend(warm.seed_builder(root_vals))
    for sn in seed_queue:
        sn.lower_bound = max(sn.lower_bound, root_bound)
        sn.warm_start = root_out.trajectory
        sn.seeded = True
        sn.node_id = node_counter
        sn.order_hint = node_counter
        node_counter += 1
    dropped_unresolved = False

    def prune_ub():
        return incumbent_obj - gap_for(incumbent_obj) if incumbent is not None else math.inf

    def remaining_lower():
        vals = [n.lower_bound for n in open_set] + [n.lower_bound for n in seed_queue]
        lo = min(vals) if vals else math.inf
        if incumbent is not None:
            lo = min(lo, incumbent_obj)
        return lo if lo < math.inf else root_bound

    # the root was fractional: branch it immediately
    var, val = select_variable(
        problem, root_bounds, fractional, root_bound, table, options, stats, prune_ub()
    )
    down, up = branch(root_node, var, val, node_counter, options.int_tol)
    node_counter += 2
    open_set.extend([down, up])

    node_ipm = options.ipm
    if not options.early_termination:
        node_ipm = qp.IpmOptions(**{**options.ipm.__dict__, "early_termination": False})

    while seed_queue or open_set:
        if stats.nodes >= options.max_nodes:
            return finish(
                MiqpStatus.NODE_LIMIT, incumbent_obj if incumbent else None, incumbent,
                remaining_lower(), incumbent_path, root_vals,
            )
        if time.perf_counter() - t0 > options.time_limit:
            return finish(
                MiqpStatus.TIME_LIMIT, incumbent_obj if incumbent else None, incumbent,
                remaining_lower(), incumbent_path, root_vals,
            )
        if seed_queue:
            node = seed_queue.pop(0)
        else:
            idx = select_node(open_set, incumbent is not None)
            node = open_set.pop(idx)
        if node.lower_bound >= prune_ub():
            continue

        node_bounds = root_bounds.clone()
        if not _apply_deltas(node_bounds, node.delta_bounds, options.presolve_opts.eps):
            continue
        stats.nodes += 1

        if options.presolve == "full" and node.depth > 0:
            npo = PresolveOptions(
                eps=options.presolve_opts.eps,
                eps_max=options.presolve_opts.eps_max,
                n_max=options.node_presolve_nmax,
                n_probing=options.presolve_opts.n_probing,
                l_max=options.presolve_opts.l_max,
                probing_enabled=False,
            )
            pres = presolve(problem, node_bounds, npo)
            stats.presolve_fixings += pres.stats.variables_fixed
            if not pres.feasible:
                continue

        try:
            relax = reduce_problem(problem, node_bounds)
        except InfeasibleBoundsError:
            continue
        out = qp.solve_relaxation(
            relax, warm=node.warm_start, upper_bound=prune_ub(), options=node_ipm
        )
        stats.qp_solves += 1
        stats.qp_iterations += out.stats.iterations
        if out.status is qp.QpStatus.ITERATION_LIMIT:
            # usually a slowly diverging infeasible relaxation; give the
            # certificate machinery a long leash once before giving up
            retry = qp.IpmOptions(**{**node_ipm.__dict__, "max_iters": 2000})
            out = qp.solve_relaxation(
                relax, warm=node.warm_start, upper_bound=prune_ub(), options=retry
            )
            stats.qp_solves += 1
            stats.qp_iterations += out.stats.iterations

        if out.status is qp.QpStatus.INFEASIBLE:
            continue
        if out.status is qp.QpStatus.EARLY_TERMINATED:
            stats.early_terminations += 1
            continue
        if out.status is not qp.QpStatus.OPTIMAL:
            # unresolved relaxation: branching tightens the children, which
            # usually resolves the stall; a leaf that still stalls is dropped
            stats.unresolved_nodes += 1
            stuck_frac = None
            if stats.unresolved_nodes > 50:
                dropped_unresolved = True
                continue
            if out.iterate is not None:
                expanded = relax.expand(out.iterate.z)
                cands = _fractional_vars(problem, expanded, options.int_tol)
                if cands:
                    stuck_frac = max(
                        cands,
                        key=lambda it_: min(it_[1] - math.floor(it_[1]), math.ceil(it_[1]) - it_[1]),
                    )
            if stuck_frac is None:
                free_ints = [
                    c for c in problem.integer_coords()
                    if node_bounds.z_ub[c[0]][c[1]] - node_bounds.z_lb[c[0]][c[1]] > options.int_tol
                ]
                if free_ints:
                    c = free_ints[0]
                    mid = 0.5 * (node_bounds.z_lb[c[0]][c[1]] + node_bounds.z_ub[c[0]][c[1]])
                    stuck_frac = (c, math.floor(mid) + 0.5)
            if stuck_frac is None:
                dropped_unresolved = True
                continue
            down, up = branch(node, stuck_frac[0], stuck_frac[1], node_counter, options.int_tol)
            node_counter += 2
            open_set.extend([down, up])
            continue

        node_obj = out.objective
        parent_bound = node.lower_bound
        node.lower_bound = max(node.lower_bound, node_obj)
        if node.branch_var is not None and not node.seeded:
            update_pseudocosts(
                table, node.branch_var, node.branch_dir or "down",
                node_obj - parent_bound, max(node.branch_frac, 1e-12),
            )
        if node_obj >= prune_ub():
            continue

        fractional = _fractional_vars(problem, out.trajectory, options.int_tol)
        if not fractional:
            incumbent = Trajectory(out.trajectory)
            incumbent_obj = node_obj
            incumbent_path = [
                (d[0], d[1], "down" if math.isinf(d[2]) else "up",
                 d[3] if math.isinf(d[2]) else d[2], 0.0)
                for d in node.delta_bounds
            ]
            continue

        var, val = select_variable(
            problem, node_bounds, fractional, node_obj, table, options, stats, prune_ub()
        )
        node.warm_start = out.trajectory
        down, up = branch(node, var, val, node_counter, options.int_tol)
        node_counter += 2
        open_set.extend([down, up])

    if incumbent is not None and not dropped_unresolved:
        return finish(
            MiqpStatus.OPTIMAL, incumbent_obj, incumbent, incumbent_obj, incumbent_path, root_vals
        )
    if incumbent is not None:
        return finish(
            MiqpStatus.NODE_LIMIT, incumbent_obj, incumbent, remaining_lower(), incumbent_path, root_vals
        )
    if dropped_unresolved:
        return finish(MiqpStatus.NODE_LIMIT)
    return finish(MiqpStatus.INFEASIBLE, root_vals=root_vals)