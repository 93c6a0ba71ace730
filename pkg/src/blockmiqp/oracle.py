"""Ground-truth references: dense monolithic QP solves and integer enumeration.

These paths are deliberately independent of the structured solver: the QP
reference stacks the whole horizon into one dense problem and hands it to
cvxopt, and the enumeration walks every integer assignment, so they can serve
as oracles for the block-sparse machinery.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import cvxopt

from .model import DEFAULT_EPS_MAX, MiocpProblem, Trajectory

cvxopt.solvers.options.setdefault("show_progress", False)

_QP_OPTS = {
    "show_progress": False,
    "abstol": 1e-10,
    "reltol": 1e-10,
    "feastol": 1e-9,
    "maxiters": 200,
}


class OracleError(RuntimeError):
    pass


@dataclass
class ReferenceSolution:
    status: str  # "optimal" | "infeasible" | "unknown"
    objective: float | None = None
    traj: Trajectory | None = None

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass
class EnumerationResult:
    status: str  # "optimal" | "infeasible"
    objective: float | None = None
    traj: Trajectory | None = None
    assignment: dict | None = None
    qp_solves: int = 0
    nodes_pruned: int = 0


def _finite(vec: np.ndarray, eps_max: float) -> np.ndarray:
    out = vec.copy()
    out[np.abs(out) >= eps_max] = np.sign(out[np.abs(out) >= eps_max]) * np.inf
    return out


def solve_qp_reference(
    problem: MiocpProblem,
    fixed: dict[tuple[int, int], float] | None = None,
    eps_max: float = DEFAULT_EPS_MAX,
) -> ReferenceSolution:
    """Solve the continuous relaxation as one dense QP via cvxopt.

    ``fixed`` pins selected (stage, z-index) variables; pinned variables (and
    variables with equal bounds) are eliminated from the dense system before
    the solve, which keeps the handed-off QP well posed.  A retry ladder
    (default solver, LDL KKT solver, tiny Tikhonov term) guards against
    numerically marginal instances; a final failure raises instead of
    guessing.
    """
    fixed = fixed or {}
    feas_tol = 1e-7
    offsets = []
    total = 0
    for st in problem.stages:
        offsets.append(total)
        total += st.nz
    H = np.zeros((total, total))
    h = np.zeros(total)
    values = np.zeros(total)
    is_fixed = np.zeros(total, dtype=bool)
    for i, st in enumerate(problem.stages):
        off = offsets[i]
        H[off : off + st.nz, off : off + st.nz] = st.H
        h[off : off + st.nz] = st.cost_gradient()
        lb = _finite(st.z_lb, eps_max)
        ub = _finite(st.z_ub, eps_max)
        for j in range(st.nz):
            if (i, j) in fixed:
                is_fixed[off + j] = True
                values[off + j] = float(fixed[(i, j)])
                if not (lb[j] - feas_tol <= values[off + j] <= ub[j] + feas_tol):
                    return ReferenceSolution("infeasible")
            elif lb[j] == ub[j] and np.isfinite(lb[j]):
                is_fixed[off + j] = True
                values[off + j] = lb[j]

    free = np.flatnonzero(~is_fixed)
    pos = -np.ones(total, dtype=int)
    pos[free] = np.arange(free.size)
    nfree = free.size
    const = 0.5 * float(values @ H @ values) + float(h[is_fixed] @ values[is_fixed])
    Hf = H[np.ix_(free, free)]
    hf = h[free] + H[np.ix_(free, np.flatnonzero(is_fixed))] @ values[is_fixed]

    A_rows, b_vals = [], []
    G_rows, g_vals = [], []

    def add_row(row_full: np.ndarray, lo: float, hi: float) -> bool:
        """Append the reduced row, scaled to unit norm; False when a constant
        row is violated."""
        shift = float(row_full[is_fixed] @ values[is_fixed])
        lo, hi = lo - shift, hi - shift
        red = row_full[free]
        if red.size == 0 or np.abs(red).max() <= 1e-14:
            return lo <= feas_tol and hi >= -feas_tol
        scale = float(np.abs(red).max())
        red = red / scale
        lo, hi = lo / scale, hi / scale
        if np.isfinite(lo) and lo == hi:
            A_rows.append(red)
            b_vals.append(lo)
            return True
        if np.isfinite(hi):
            G_rows.append(red)
            g_vals.append(hi)
        if np.isfinite(lo):
            G_rows.append(-red)
            g_vals.append(-lo)
        return True

    for i, st in enumerate(problem.stages):
        off = offsets[i]
        lb = _finite(st.z_lb, eps_max)
        ub = _finite(st.z_ub, eps_max)
        for j in range(st.nz):
            k = off + j
            if is_fixed[k]:
                continue
            if np.isfinite(ub[j]):
                row = np.zeros(total)
                row[k] = 1.0
                G_rows.append(row[free])
                g_vals.append(ub[j])
            if np.isfinite(lb[j]):
                row = np.zeros(total)
                row[k] = -1.0
                G_rows.append(row[free])
                g_vals.append(-lb[j])
        E = st.E
        cl = _finite(st.c_lb, eps_max)
        cu = _finite(st.c_ub, eps_max)
        for k in range(st.nc):
            if not np.isfinite(cl[k]) and not np.isfinite(cu[k]):
                continue
            row = np.zeros(total)
            row[off : off + st.nz] = E[k]
            if not add_row(row, cl[k], cu[k]):
                return ReferenceSolution("infeasible")
        if i < problem.N:
            F = st.F
            noff = offsets[i + 1]
            for kk in range(st.A.shape[0]):
                row = np.zeros(total)
                row[off : off + st.nz] = F[kk]
                row[noff + kk] = -1.0
                if not add_row(row, -st.a[kk], -st.a[kk]):
                    return ReferenceSolution("infeasible")

    A = np.asarray(A_rows) if A_rows else np.zeros((0, nfree))
    b = np.asarray(b_vals)
    G = np.asarray(G_rows) if G_rows else np.zeros((0, nfree))
    g = np.asarray(g_vals)
    if nfree == 0:
        return ReferenceSolution("optimal", const, _expand_traj(problem, offsets, values))

    kwargs = {}
    if A.shape[0]:
        kwargs = {"A": cvxopt.matrix(A), "b": cvxopt.matrix(b)}
    Gm, gm = cvxopt.matrix(G), cvxopt.matrix(g)
    loose = dict(_QP_OPTS, abstol=1e-8, reltol=1e-8, feastol=1e-8, maxiters=300)
    attempts = (
        (Hf, {}, _QP_OPTS),
        (Hf, {"kktsolver": "ldl"}, _QP_OPTS),
        (Hf + 1e-9 * np.eye(nfree), {"kktsolver": "ldl"}, _QP_OPTS),
        (Hf + 1e-9 * np.eye(nfree), {"kktsolver": "ldl"}, loose),
    )
    sol = None
    for Hmat, extra, opt_set in attempts:
        for key, val in opt_set.items():
            cvxopt.solvers.options[key] = val
        try:
            sol = cvxopt.solvers.qp(
                cvxopt.matrix(Hmat), cvxopt.matrix(hf), Gm, gm, **kwargs, **extra
            )
        except (ValueError, ArithmeticError):
            sol = None
            continue
        if sol["status"] != "unknown":
            break

    if sol is None or sol["status"] == "unknown":
        # interior-point stall (typically an empty relative interior from
        # implied equalities); the ADMM path does not need an interior
        osqp_res = _osqp_solve(Hf, hf, G, g, A, b)
        if osqp_res is not None:
            status, xf = osqp_res
            if status == "infeasible":
                return ReferenceSolution("infeasible")
            if status == "optimal":
                x = values.copy()
                x[free] = xf
                obj = const + 0.5 * float(xf @ Hf @ xf) + float(hf @ xf)
                return ReferenceSolution("optimal", obj, _expand_traj(problem, offsets, x))

    if sol is not None and sol["status"] == "optimal":
        xf = np.asarray(sol["x"]).ravel()
        x = values.copy()
        x[free] = xf
        obj = const + 0.5 * float(xf @ Hf @ xf) + float(hf @ xf)
        return ReferenceSolution("optimal", obj, _expand_traj(problem, offsets, x))
    if sol is not None and "infeasible" in sol["status"]:
        return ReferenceSolution("infeasible")

    # cvxopt could not certify either way; let an LP arbitrate feasibility,
    # and accept a stalled iterate only when it verifiably solves the QP
    from scipy.optimize import linprog

    lp = linprog(
        c=np.zeros(nfree),
        A_ub=G if G.shape[0] else None,
        b_ub=g if G.shape[0] else None,
        A_eq=A if A.shape[0] else None,
        b_eq=b if A.shape[0] else None,
        bounds=[(None, None)] * nfree,
        method="highs",
    )
    if lp.status == 2:
        return ReferenceSolution("infeasible")
    if sol is not None and sol.get("x") is not None:
        xf = np.asarray(sol["x"]).ravel()
        ok = True
        if G.shape[0] and float((G @ xf - g).max()) > 1e-6:
            ok = False
        if ok and A.shape[0] and float(np.abs(A @ xf - b).max()) > 1e-6:
            ok = False
        gap = abs(float(sol["primal objective"]) - float(sol["dual objective"]))
        if ok and gap <= 1e-6 * (1.0 + abs(float(sol["primal objective"]))):
            x = values.copy()
            x[free] = xf
            obj = const + 0.5 * float(xf @ Hf @ xf) + float(hf @ xf)
            return ReferenceSolution("optimal", obj, _expand_traj(problem, offsets, x))
    raise OracleError("reference QP did not converge")


def _expand_traj(problem: MiocpProblem, offsets: list[int], x: np.ndarray) -> Trajectory:
    return Trajectory(
        [x[offsets[i] : offsets[i] + st.nz] for i, st in enumerate(problem.stages)]
    )


def _osqp_solve(H, h, G, g, A, b):
    """High-accuracy OSQP solve of min 1/2 x'Hx + h'x s.t. Gx <= g, Ax = b.

    Returns ("optimal", x), ("infeasible", None), or None when unavailable
    or inconclusive.
    """
    try:
        import osqp
        import scipy.sparse as sp
    except ImportError:
        return None
    n = H.shape[0]
    rows = sp.vstack(
        [sp.csc_matrix(G), sp.csc_matrix(A)], format="csc"
    ) if (G.shape[0] or A.shape[0]) else sp.csc_matrix((0, n))
    lo = np.concatenate([np.full(G.shape[0], -np.inf), b])
    hi = np.concatenate([g, b])
    prob = osqp.OSQP()
    try:
        prob.setup(
            P=sp.csc_matrix(np.triu(H)), q=h, A=rows, l=lo, u=hi,
            eps_abs=1e-9, eps_rel=1e-9, eps_prim_inf=1e-9, eps_dual_inf=1e-9,
            max_iter=200_000, polish=True, verbose=False,
        )
        res = prob.solve()
    except Exception:
        return None
    status = str(getattr(res.info, "status", "")).lower()
    if "infeasible" in status and "dual" not in status:
        return ("infeasible", None)
    if "solved" in status:
        return ("optimal", np.asarray(res.x, dtype=float))
    return None


# ---------------------------------------------------------------------------
# Exhaustive enumeration over integer assignments
# ---------------------------------------------------------------------------


def _interval_row_check(E, cl, cu, lb, ub, tol: float) -> bool:
    """Necessary feasibility: the row range over the box must meet [cl, cu]."""
    if E.shape[0] == 0:
        return True
    Ep = np.where(E > 0, E, 0.0)
    Em = np.where(E < 0, E, 0.0)
    lo = _interval_dot(Ep, lb) + _interval_dot(Em, ub)
    hi = _interval_dot(Ep, ub) + _interval_dot(Em, lb)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    return bool(np.all(lo <= cu + tol) and np.all(hi >= cl - tol))


def _interval_dot(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        prod = M * v[None, :]
    prod[M == 0.0] = 0.0
    return prod.sum(axis=1)


def enumerate_oracle(
    problem: MiocpProblem,
    max_combinations: int = 2**20,
    prune: bool = True,
    tol: float = 1e-7,
) -> EnumerationResult:
    """Best integer assignment by trying the continuous QP of every one.

    Assignments are walked stage by stage; with ``prune`` on, partial
    assignments whose interval relaxation already violates a row or the
    forward-propagated dynamics are discarded (the check is conservative, so
    no feasible assignment is ever lost).
    """
    coords: list[list[tuple[int, int, int, int]]] = []
    combos = 1
    for i, st in enumerate(problem.stages):
        per_stage = []
        for j in st.int_z_idx():
            lo, hi = st.z_lb[j], st.z_ub[j]
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise OracleError(f"integer variable with unbounded domain at stage {i}")
            lo_i, hi_i = math.ceil(lo - 1e-9), math.floor(hi + 1e-9)
            if hi_i < lo_i:
                return EnumerationResult("infeasible")
            combos *= hi_i - lo_i + 1
            per_stage.append((i, int(j), lo_i, hi_i))
        coords.append(per_stage)
    if combos > max_combinations:
        raise OracleError(f"{combos} integer combinations exceed the {max_combinations} guard")

    best = EnumerationResult("infeasible")
    stats = {"qp": 0, "pruned": 0}

    lb0 = [st.z_lb.astype(float).copy() for st in problem.stages]
    ub0 = [st.z_ub.astype(float).copy() for st in problem.stages]

    def recurse(stage: int, lb, ub, fixed: dict):
        if stage > problem.N:
            res = solve_qp_reference(problem, fixed=fixed)
            stats["qp"] += 1
            if res.optimal and (best.objective is None or res.objective < best.objective - 0.0):
                best.status = "optimal"
                best.objective = res.objective
                best.traj = res.traj
                best.assignment = dict(fixed)
            return
        st = problem.stages[stage]
        stage_vars = coords[stage]
        choices = [range(lo, hi + 1) for (_, _, lo, hi) in stage_vars]
        for combo in itertools.product(*choices):
            nlb = lb[stage].copy()
            nub = ub[stage].copy()
            for (s_, j, _, _), val in zip(stage_vars, combo):
                nlb[j] = nub[j] = float(val)
            if prune:
                if not _interval_row_check(st.E, st.c_lb, st.c_ub, nlb, nub, tol):
                    stats["pruned"] += 1
                    continue
            lb_next = list(lb)
            ub_next = list(ub)
            lb_next[stage] = nlb
            ub_next[stage] = nub
            if prune and stage < problem.N:
                F = st.F
                Fp = np.where(F > 0, F, 0.0)
                Fm = np.where(F < 0, F, 0.0)
                x_lo = st.a + _interval_dot(Fp, nlb) + _interval_dot(Fm, nub)
                x_hi = st.a + _interval_dot(Fp, nub) + _interval_dot(Fm, nlb)
                x_lo = np.where(np.isnan(x_lo), -np.inf, x_lo)
                x_hi = np.where(np.isnan(x_hi), np.inf, x_hi)
                nxt_lb = lb_next[stage + 1].copy()
                nxt_ub = ub_next[stage + 1].copy()
                nxp = x_lo.size
                nxt_lb[:nxp] = np.maximum(nxt_lb[:nxp], x_lo - tol)
                nxt_ub[:nxp] = np.minimum(nxt_ub[:nxp], x_hi + tol)
                if np.any(nxt_lb > nxt_ub + tol):
                    stats["pruned"] += 1
                    continue
                lb_next[stage + 1] = nxt_lb
                ub_next[stage + 1] = nxt_ub
            nfixed = dict(fixed)
            for (s_, j, _, _), val in zip(stage_vars, combo):
                nfixed[(s_, j)] = float(val)
            recurse(stage + 1, lb_next, ub_next, nfixed)

    recurse(0, lb0, ub0, {})
    best.qp_solves = stats["qp"]
    best.nodes_pruned = stats["pruned"]
    return best
