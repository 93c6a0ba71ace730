"""Exact block-sparse presolve: tightening that preserves the integer-feasible
set and the optimal value.

All operations work stage by stage on a :class:`BoundState`.  Bound deduction
goes through a single-row residual-capacity computation (a conservative
approximation of optimization-based bound tightening), applied to the
inequality rows on the forward pass and to the dynamics rows, read as
two-sided rows, on the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundState
from .model import MiocpProblem

_INT_ROUND_EPS = 1e-9


@dataclass
class PresolveOptions:
    eps: float = 1e-9
    eps_max: float = 1e12
    n_max: int = 10
    n_probing: int = 2
    l_max: int = 1
    probing_enabled: bool = True
    progress_threshold: float = 1.0
    min_iterations: int = 2

    def __post_init__(self):
        if self.eps <= 0 or self.eps_max <= 1:
            raise ValueError("eps must be positive and eps_max large")


@dataclass
class PresolveStats:
    iterations: int = 0
    variables_fixed: int = 0
    bounds_tightened: int = 0
    rows_removed: int = 0
    coefficients_strengthened: int = 0
    probes: int = 0


@dataclass
class PresolveResult:
    feasible: bool
    bounds: BoundState | None = None
    stage: int | None = None
    index: int | None = None
    kind: str | None = None
    stats: PresolveStats = field(default_factory=PresolveStats)

    @classmethod
    def infeasible_from(cls, bounds: BoundState, stats: PresolveStats | None = None) -> "PresolveResult":
        info = bounds.infeasible_info or (0, 0, "variable")
        return cls(False, bounds, info[0], info[1], info[2], stats or PresolveStats())


# ---------------------------------------------------------------------------
# Single-row bound deduction kernel
# ---------------------------------------------------------------------------


def _activity_contributions(E: np.ndarray, lb: np.ndarray, ub: np.ndarray):
    """Per-entry contributions to the row max/min activities.

    Max-activity entries live in {finite, +inf}, min-activity entries in
    {finite, -inf}; zero coefficients contribute exactly zero.
    """
    Ep = np.where(E > 0, E, 0.0)
    Em = np.where(E < 0, E, 0.0)
    with np.errstate(invalid="ignore"):
        up = Ep * ub[None, :]
        lo_p = Ep * lb[None, :]
        lo_m = Em * ub[None, :]
        up_m = Em * lb[None, :]
    up[Ep == 0.0] = 0.0
    lo_p[Ep == 0.0] = 0.0
    lo_m[Em == 0.0] = 0.0
    up_m[Em == 0.0] = 0.0
    cmax = up + up_m
    cmin = lo_p + lo_m
    return cmax, cmin


def _excluding(total_finite, inf_count, contrib, sign_inf):
    """Row totals with one column's contribution removed, tracking infinities."""
    isinf = np.isinf(contrib)
    finite_part = np.where(isinf, 0.0, contrib)
    rest = total_finite[:, None] - finite_part
    rest_inf = inf_count[:, None] - isinf.astype(int)
    return np.where(rest_inf > 0, sign_inf, rest)


def candidate_bounds(
    E: np.ndarray,
    cl: np.ndarray,
    cu: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    int_mask: np.ndarray,
    eps: float,
):
    """Tightest per-variable bounds deducible from each row individually.

    Implements the residual-capacity formulas: for each (row k, variable j)
    the remaining rows' variables are boxed and the row is solved for
    variable j alone, then candidates are aggregated over rows and integer
    candidates are rounded inward.
    """
    R, C = E.shape
    if R == 0 or C == 0:
        return lb.copy(), ub.copy()
    cmax, cmin = _activity_contributions(E, lb, ub)
    maxfin = np.where(np.isinf(cmax), 0.0, cmax).sum(axis=1)
    maxinf = np.isinf(cmax).sum(axis=1)
    minfin = np.where(np.isinf(cmin), 0.0, cmin).sum(axis=1)
    mininf = np.isinf(cmin).sum(axis=1)
    others_max = _excluding(maxfin, maxinf, cmax, np.inf)
    others_min = _excluding(minfin, mininf, cmin, -np.inf)

    pos = E > eps
    neg = E < -eps
    d_lo = np.full((R, C), -np.inf)
    d_hi = np.full((R, C), np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        num_lo_pos = cl[:, None] - others_max
        num_hi_pos = cu[:, None] - others_min
        d_lo = np.where(pos, num_lo_pos / E, d_lo)
        d_hi = np.where(pos, num_hi_pos / E, d_hi)
        d_lo = np.where(neg, num_hi_pos / E, d_lo)
        d_hi = np.where(neg, num_lo_pos / E, d_hi)
    d_lo = np.where(np.isnan(d_lo), -np.inf, d_lo)
    d_hi = np.where(np.isnan(d_hi), np.inf, d_hi)

    cand_lo = d_lo.max(axis=0)
    cand_hi = d_hi.min(axis=0)
    if int_mask.any():
        with np.errstate(invalid="ignore"):
            cand_lo = np.where(
                int_mask & np.isfinite(cand_lo), np.ceil(cand_lo - _INT_ROUND_EPS), cand_lo
            )
            cand_hi = np.where(
                int_mask & np.isfinite(cand_hi), np.floor(cand_hi + _INT_ROUND_EPS), cand_hi
            )
    return np.maximum(lb, cand_lo), np.minimum(ub, cand_hi)


def single_row_tighten(
    problem: MiocpProblem,
    bounds: BoundState,
    stage: int,
    j: int,
    eps: float = 1e-9,
) -> tuple[float, float]:
    """Tighten one variable against the stage inequality rows; apply and return.

    Crossing bounds are recorded on the state instead of raising.
    """
    st = problem.stages[stage]
    E = np.hstack([st.C, bounds.D[stage]]) if st.nc else np.zeros((0, st.nz))
    lb = bounds.z_lb[stage]
    ub = bounds.z_ub[stage]
    mask = bounds.int_mask[stage]
    nlb, nub = candidate_bounds(E, bounds.c_lb[stage], bounds.c_ub[stage], lb, ub, mask, eps)
    new_lb = lb.copy()
    new_ub = ub.copy()
    new_lb[j] = nlb[j]
    new_ub[j] = nub[j]
    bounds.intersect_z(stage, new_lb, new_ub, eps)
    return bounds.z_lb[stage][j], bounds.z_ub[stage][j]


# ---------------------------------------------------------------------------
# Forward-backward domain propagation
# ---------------------------------------------------------------------------


def _stage_row_pass(problem, bounds, stage, eps, max_passes=2) -> bool:
    st = problem.stages[stage]
    if st.nc == 0:
        return True
    E = np.hstack([st.C, bounds.D[stage]])
    for _ in range(max_passes):
        before_lb = bounds.z_lb[stage].copy()
        before_ub = bounds.z_ub[stage].copy()
        nlb, nub = candidate_bounds(
            E, bounds.c_lb[stage], bounds.c_ub[stage], before_lb, before_ub,
            bounds.int_mask[stage], eps,
        )
        if not bounds.intersect_z(stage, nlb, nub, eps):
            return False
        if np.array_equal(before_lb, bounds.z_lb[stage]) and np.array_equal(
            before_ub, bounds.z_ub[stage]
        ):
            break
    return True


def domain_propagation_sweep(problem: MiocpProblem, bounds: BoundState, eps: float = 1e-9) -> PresolveResult:
    """One forward-backward pass of bound propagation (rows and dynamics).

    Forward: tighten stage variables against the stage rows, then push the
    reachable interval of the dynamics into the next stage's state bounds.
    Backward: read each dynamics row as a two-sided row over the stage
    variables, bounded by the (already tightened) next-stage state interval.
    """
    N = problem.N
    for i in range(N + 1):
        if not _stage_row_pass(problem, bounds, i, eps):
            return PresolveResult.infeasible_from(bounds)
        if i < N:
            st = problem.stages[i]
            F = st.F
            cmax, cmin = _activity_contributions(F, bounds.z_lb[i], bounds.z_ub[i])
            hi = st.a + cmax.sum(axis=1)
            lo = st.a + cmin.sum(axis=1)
            nxp = st.A.shape[0]
            new_lb = bounds.z_lb[i + 1].copy()
            new_ub = bounds.z_ub[i + 1].copy()
            new_lb[:nxp] = np.maximum(new_lb[:nxp], lo)
            new_ub[:nxp] = np.minimum(new_ub[:nxp], hi)
            if not bounds.intersect_z(i + 1, new_lb, new_ub, eps):
                return PresolveResult.infeasible_from(bounds)
    for i in range(N - 1, -1, -1):
        st = problem.stages[i]
        nxp = st.A.shape[0]
        row_lb = bounds.z_lb[i + 1][:nxp] - st.a
        row_ub = bounds.z_ub[i + 1][:nxp] - st.a
        nlb, nub = candidate_bounds(
            st.F, row_lb, row_ub, bounds.z_lb[i], bounds.z_ub[i], bounds.int_mask[i], eps
        )
        if not bounds.intersect_z(i, nlb, nub, eps):
            return PresolveResult.infeasible_from(bounds)
    return PresolveResult(True, bounds)


# ---------------------------------------------------------------------------
# Redundant rows and dual fixings
# ---------------------------------------------------------------------------


def redundancy_and_dual_fixings(
    problem: MiocpProblem,
    bounds: BoundState,
    eps: float = 1e-9,
    eps_max: float = 1e12,
) -> PresolveResult:
    """Drop provably redundant row sides; fix cost-only controls by sign.

    A control whose dynamics column and Hessian row vanish, entering every
    non-redundant row side with coefficients of one sign, is fixed to the
    bound favored by its gradient entry.
    """
    for i, st in enumerate(problem.stages):
        lb = bounds.z_lb[i]
        ub = bounds.z_ub[i]
        cl = bounds.c_lb[i]
        cu = bounds.c_ub[i]
        if st.nc:
            E = np.hstack([st.C, bounds.D[i]])
            cmax, cmin = _activity_contributions(E, lb, ub)
            maxact = cmax.sum(axis=1)
            minact = cmin.sum(axis=1)
            viol_up = np.isfinite(cu) & (cu - minact < -eps)
            viol_lo = np.isfinite(cl) & (cl - maxact > eps)
            if np.any(viol_up | viol_lo):
                k = int(np.argmax(viol_up | viol_lo))
                bounds.mark_infeasible(i, k, "row")
                return PresolveResult.infeasible_from(bounds)
            red_up = np.isfinite(cu) & np.isfinite(maxact) & (cu - maxact > -eps)
            red_lo = np.isfinite(cl) & np.isfinite(minact) & (cl - minact < eps)
            bounds.rows_removed += int(red_up.sum() + red_lo.sum())
            cu[red_up] = np.inf
            cl[red_lo] = -np.inf
        for j in range(st.nu):
            col = st.nx + j
            if ub[col] - lb[col] <= eps:
                continue
            if bounds.int_mask[i][col]:
                # sign-based fixing of an integer would drop feasible
                # (suboptimal) assignments; tightening stays value-exact only
                # for continuous auxiliaries
                continue
            if not (np.isfinite(lb[col]) and np.isfinite(ub[col])):
                continue
            if i < problem.N and np.abs(st.B[:, j]).max(initial=0.0) >= eps:
                continue
            if np.abs(st.H[:, col]).max(initial=0.0) >= eps:
                continue
            dcol = bounds.D[i][:, j] if st.nc else np.zeros(0)
            tilde = []
            if st.nc:
                tilde.append(dcol[cu < eps_max])
                tilde.append(-dcol[cl > -eps_max])
            tilde = np.concatenate(tilde) if tilde else np.zeros(0)
            r_j = st.r[j]
            if (tilde.size == 0 or tilde.min() > -eps) and r_j > -eps:
                bounds.intersect_z(
                    i,
                    np.full(st.nz, -np.inf),
                    np.where(np.arange(st.nz) == col, lb[col], np.inf),
                    eps,
                )
            elif (tilde.size == 0 or tilde.max() < eps) and r_j < eps:
                bounds.intersect_z(
                    i,
                    np.where(np.arange(st.nz) == col, ub[col], -np.inf),
                    np.full(st.nz, np.inf),
                    eps,
                )
    return PresolveResult(True, bounds)


# ---------------------------------------------------------------------------
# Coefficient strengthening
# ---------------------------------------------------------------------------


def coefficient_strengthening(
    problem: MiocpProblem,
    bounds: BoundState,
    eps: float = 1e-9,
    eps_max: float = 1e12,
) -> PresolveResult:
    """Shrink integer coefficients of one-sided rows (big-M reduction).

    The residual capacities computed at stage entry stay valid throughout:
    every update changes the row bound and the coefficient by amounts whose
    activity effects cancel.
    """
    for i, st in enumerate(problem.stages):
        if st.nc == 0 or st.int_idx.size == 0:
            continue
        D = bounds.D[i]
        cl = bounds.c_lb[i]
        cu = bounds.c_ub[i]
        E = np.hstack([st.C, D])
        cmax, cmin = _activity_contributions(E, bounds.z_lb[i], bounds.z_ub[i])
        slack_up = cu - cmax.sum(axis=1)     # upper-side residual capacity
        slack_lo = cmin.sum(axis=1) - cl     # lower-side residual capacity
        for j in st.int_idx:
            col = st.nx + j
            lo_j = bounds.z_lb[i][col]
            hi_j = bounds.z_ub[i][col]
            width = hi_j - lo_j
            if width <= eps or not np.isfinite(width):
                continue
            if width > 1.0 + eps:
                # the shrink-and-shift update is exact only when the integer
                # has no interior points between its bounds
                continue
            one_sided_up = (cu < eps_max) & (cl < -eps_max)
            one_sided_lo = (cl > -eps_max) & (cu > eps_max)
            dcol = D[:, j]
            for rows_mask, slack, is_upper in (
                (one_sided_up, slack_up, True),
                (one_sided_lo, slack_lo, False),
            ):
                ks = np.flatnonzero(rows_mask)
                if ks.size == 0:
                    continue
                d_til = slack[ks] + np.abs(dcol[ks]) * width
                apply = d_til > eps
                for idx, k in enumerate(ks):
                    if not apply[idx]:
                        continue
                    dt = d_til[idx]
                    if dcol[k] > eps:
                        D[k, j] -= dt
                        if is_upper:
                            cu[k] -= dt * hi_j
                        else:
                            cl[k] -= dt * lo_j
                    elif dcol[k] < -eps:
                        D[k, j] += dt
                        if is_upper:
                            cu[k] += dt * lo_j
                        else:
                            cl[k] += dt * hi_j
                    else:
                        continue
                    bounds.coefficients_strengthened += 1
    return PresolveResult(True, bounds)


# ---------------------------------------------------------------------------
# Binary probing
# ---------------------------------------------------------------------------


def _is_binary(bounds: BoundState, stage: int, col: int, eps: float) -> bool:
    lo = bounds.z_lb[stage][col]
    hi = bounds.z_ub[stage][col]
    return (
        bounds.int_mask[stage][col]
        and hi - lo > eps
        and lo >= -eps
        and hi <= 1.0 + eps
    )


def _probe_one(problem, bounds, stage, col, value, options) -> tuple[BoundState, bool]:
    clone = bounds.clone()
    clone.fix(stage, col, value)
    for _ in range(max(options.n_probing, 0)):
        before = clone.progress_snapshot()
        res = domain_propagation_sweep(problem, clone, options.eps)
        if not res.feasible:
            return clone, False
        if clone.progress_snapshot() == before:
            break
    return clone, True


def probe_binary(
    problem: MiocpProblem,
    bounds: BoundState,
    options: PresolveOptions | None = None,
    only: tuple[int, int] | None = None,
) -> PresolveResult:
    """Tentatively fix each unfixed binary both ways and exploit the outcome.

    Both directions infeasible proves the subproblem infeasible; one side
    infeasible fixes the variable the other way and adopts the propagated
    bounds; otherwise the elementwise union of the two propagated boxes is a
    valid tightening.  ``only`` restricts the scan to one (stage, z-index).
    """
    options = options or PresolveOptions()
    eps = options.eps
    for i in range(problem.N + 1):
        st = problem.stages[i]
        for j in range(st.nu):
            col = st.nx + j
            if only is not None and (i, col) != only:
                continue
            if not _is_binary(bounds, i, col, eps):
                continue
            lo = bounds.z_lb[i][col]
            hi = bounds.z_ub[i][col]
            state0, ok0 = _probe_one(problem, bounds, i, col, lo, options)
            state1, ok1 = _probe_one(problem, bounds, i, col, hi, options)
            if not ok0 and not ok1:
                bounds.mark_infeasible(i, col, "probe")
                return PresolveResult.infeasible_from(bounds)
            if not ok0:
                _adopt(bounds, state1)
            elif not ok1:
                _adopt(bounds, state0)
            else:
                for s in range(bounds.num_stages):
                    new_lb = np.minimum(state0.z_lb[s], state1.z_lb[s])
                    new_ub = np.maximum(state0.z_ub[s], state1.z_ub[s])
                    bounds.intersect_z(s, new_lb, new_ub, eps)
    return PresolveResult(True, bounds)


def _adopt(bounds: BoundState, source: BoundState) -> None:
    from .bounds import TIGHTEN_EVENT_TOL

    for s in range(bounds.num_stages):
        moved = np.count_nonzero(source.z_lb[s] - bounds.z_lb[s] >= TIGHTEN_EVENT_TOL)
        moved += np.count_nonzero(bounds.z_ub[s] - source.z_ub[s] >= TIGHTEN_EVENT_TOL)
        bounds.tighten_events += int(moved)
        bounds.z_lb[s][:] = source.z_lb[s]
        bounds.z_ub[s][:] = source.z_ub[s]


# ---------------------------------------------------------------------------
# Presolve loop
# ---------------------------------------------------------------------------


def presolve(
    problem: MiocpProblem,
    bounds: BoundState,
    options: PresolveOptions | None = None,
) -> PresolveResult:
    """Iterate sweep, redundancy removal and strengthening until stalling.

    Probing runs at most once per call, and only when the cheap operations
    stopped making progress while the probing budget allows it.
    """
    options = options or PresolveOptions()
    stats = PresolveStats()
    fixed_start = bounds.fixed_count()
    rows_start = bounds.rows_removed
    coef_start = bounds.coefficients_strengthened
    events_start = bounds.tighten_events

    probing = options.probing_enabled
    l_round = 0
    n = 0
    sufficient = True
    while sufficient and not bounds.infeasible and n < options.n_max:
        it_fixed, it_events = bounds.progress_snapshot()
        res = domain_propagation_sweep(problem, bounds, options.eps)
        if not res.feasible:
            break
        res = redundancy_and_dual_fixings(problem, bounds, options.eps, options.eps_max)
        if not res.feasible:
            break
        coefficient_strengthening(problem, bounds, options.eps, options.eps_max)
        measure = _progress_measure(bounds, it_fixed, it_events)
        sufficient = n < options.min_iterations or measure >= options.progress_threshold
        if (
            not bounds.infeasible
            and probing
            and not sufficient
            and l_round < options.l_max
        ):
            res = probe_binary(problem, bounds, options)
            l_round += 1
            stats.probes += 1
            probing = False
            if not res.feasible:
                break
            measure = _progress_measure(bounds, it_fixed, it_events)
            sufficient = measure >= options.progress_threshold
        n += 1

    stats.iterations = n
    stats.variables_fixed = bounds.fixed_count() - fixed_start
    stats.rows_removed = bounds.rows_removed - rows_start
    stats.coefficients_strengthened = bounds.coefficients_strengthened - coef_start
    stats.bounds_tightened = bounds.tighten_events - events_start
    if bounds.infeasible:
        return PresolveResult.infeasible_from(bounds, stats)
    return PresolveResult(True, bounds, stats=stats)


def _progress_measure(bounds: BoundState, fixed_before: int, events_before: int) -> float:
    fixed_now, events_now = bounds.progress_snapshot()
    return (fixed_now - fixed_before) + 0.01 * (events_now - events_before)
