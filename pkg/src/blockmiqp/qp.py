"""Structured convex-QP solver used for the relaxations.

The solver is an infeasible primal-dual interior-point method whose
per-iteration linear algebra classifies inequality rows by their barrier
weights ``w = s / mu`` (active / inactive / guessing), condenses the KKT
system onto the primal variables, and factors the resulting block-tridiagonal
augmented Hessian by a stage-wise Cholesky recursion.  A weighted dual
projection, reusing the current factorization, produces dual-feasible points
for early termination against an upper bound and for infeasibility detection.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular


class FactorizationError(RuntimeError):
    pass


@dataclass
class IpmOptions:
    tol: float = 1e-6
    max_iters: int = 250
    eps_reg: float = 1e-8          # equality / dual regularization
    w_min: float = 1e-8
    w_max: float = 1e8
    sigma: float = 0.3             # centering factor for the barrier update
    boundary_frac: float = 0.995
    psi_max: float = 1e10          # dual divergence threshold
    mu_max: float = 1e10           # multiplier divergence threshold
    projection_limit: int = 3      # projection attempts per solve
    early_termination: bool = True
    # complementarity is polished this far below tol before declaring
    # optimality; the central-path offset in the primal scales with it
    comp_polish: float = 1e-3
    polish_iters: int = 14
    stall_iters: int = 60          # plateau length before bailing out


@dataclass
class ReducedStage:
    """One stage of a variable-eliminated relaxation.

    ``Fd``/``ad`` map this stage's free variables to the free state entries of
    the next stage (their positions there are ``dyn_out``).  ``L``/``b_loc``
    are stage-local equality rows created when a dynamics output was fixed.
    """

    n: int
    H: np.ndarray
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    E: np.ndarray
    cl: np.ndarray
    cu: np.ndarray
    L: np.ndarray
    b_loc: np.ndarray
    Fd: np.ndarray | None
    ad: np.ndarray | None
    dyn_out: np.ndarray | None
    orig_idx: np.ndarray
    fixed_template: np.ndarray
    int_pos: np.ndarray


@dataclass
class StagePartition:
    v_idx: np.ndarray
    y_idx: np.ndarray
    Q_chol: np.ndarray  # lower Cholesky factor of the (regularized) v-block


@dataclass
class QpRelaxation:
    """Reduced stage data plus the objective partition and assembled rows."""

    stages: list[ReducedStage]
    const: float = 0.0
    eps_reg: float = 1e-8
    parts: list[StagePartition] = field(default_factory=list)
    G: list[np.ndarray] = field(default_factory=list)
    g: list[np.ndarray] = field(default_factory=list)
    phi_static: list[np.ndarray] = field(default_factory=list)
    phi_off: list[np.ndarray] = field(default_factory=list)
    regularization: float = 0.0

    @property
    def N(self) -> int:
        return len(self.stages) - 1

    @property
    def total_vars(self) -> int:
        return sum(st.n for st in self.stages)

    @property
    def total_ineq(self) -> int:
        return sum(gv.size for gv in self.g)

    def expand(self, z: list[np.ndarray]) -> list[np.ndarray]:
        """Scatter a reduced solution back into original stage coordinates."""
        out = []
        for st, zs in zip(self.stages, z):
            full = st.fixed_template.copy()
            if st.n:
                full[st.orig_idx] = zs
            out.append(full)
        return out

    def primal_objective(self, z: list[np.ndarray]) -> float:
        val = self.const
        for st, zs in zip(self.stages, z):
            if st.n:
                val += 0.5 * float(zs @ st.H @ zs) + float(st.h @ zs)
        return val


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    EARLY_TERMINATED = "early_terminated"
    ITERATION_LIMIT = "iteration_limit"


@dataclass
class QpStats:
    iterations: int = 0
    projections_attempted: int = 0
    projections_accepted: int = 0
    factorizations: int = 0


@dataclass
class QpOutcome:
    status: QpStatus
    trajectory: list[np.ndarray] | None = None
    objective: float | None = None
    iterate: "IpmIterate | None" = None
    dual_bound: float | None = None
    certificate: str | None = None
    stats: QpStats = field(default_factory=QpStats)

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass
class IpmIterate:
    """Primal-dual point; multipliers are kept strictly interior."""

    z: list[np.ndarray]
    lam_dyn: list[np.ndarray]
    lam_loc: list[np.ndarray]
    mu: list[np.ndarray]
    s: list[np.ndarray]
    tau: float

    @property
    def w(self) -> list[np.ndarray]:
        out = []
        with np.errstate(over="ignore", under="ignore"):
            for si, mi in zip(self.s, self.mu):
                out.append(si / mi if si.size else si)
        return out

    def comp(self) -> float:
        total = sum(float(mi @ si) for mi, si in zip(self.mu, self.s))
        p = sum(mi.size for mi in self.mu)
        return total / max(p, 1)

    def comp_inf(self) -> float:
        """Largest single complementarity product; drives the primal accuracy."""
        vals = [float((mi * si).max()) for mi, si in zip(self.mu, self.s) if mi.size]
        return max(vals) if vals else 0.0

    def mu_inf(self) -> float:
        vals = [float(np.abs(mi).max()) for mi in self.mu if mi.size]
        return max(vals) if vals else 0.0

    def copy(self) -> "IpmIterate":
        return IpmIterate(
            [v.copy() for v in self.z],
            [v.copy() for v in self.lam_dyn],
            [v.copy() for v in self.lam_loc],
            [v.copy() for v in self.mu],
            [v.copy() for v in self.s],
            self.tau,
        )


@dataclass
class ConstraintClassification:
    """Index partition of the inequality rows of each stage."""

    inactive: list[np.ndarray]
    active: list[np.ndarray]
    guessing: list[np.ndarray]


def classify_rows(iterate: IpmIterate, options: IpmOptions) -> ConstraintClassification:
    ina, act, gue = [], [], []
    for w in iterate.w:
        ina.append(np.flatnonzero(w >= options.w_max))
        act.append(np.flatnonzero(w <= options.w_min))
        gue.append(np.flatnonzero((w > options.w_min) & (w < options.w_max)))
    return ConstraintClassification(ina, act, gue)


# ---------------------------------------------------------------------------
# Assembly: objective partition, inequality stacking, static matrix parts
# ---------------------------------------------------------------------------


def partition_objective(
    stages: list[ReducedStage], const: float = 0.0, eps_reg: float = 1e-8
) -> QpRelaxation:
    """Split variables into quadratic (v) and linear-only (y) groups per stage.

    Variables whose Hessian row is entirely zero form the y group.  The
    v-block is made strictly positive definite, escalating a diagonal shift
    until its Cholesky factorization succeeds.
    """
    relax = QpRelaxation(stages=stages, const=const, eps_reg=eps_reg)
    worst_reg = 0.0
    for st in stages:
        if st.n == 0:
            relax.parts.append(
                StagePartition(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, 0)))
            )
        else:
            scale = float(np.abs(st.H).max()) if st.H.size else 0.0
            row_mass = np.abs(st.H).max(axis=1) if st.H.size else np.zeros(st.n)
            vmask = row_mass > 1e-12 * max(1.0, scale)
            v_idx = np.flatnonzero(vmask)
            y_idx = np.flatnonzero(~vmask)
            Q = st.H[np.ix_(v_idx, v_idx)].copy()
            shift = 0.0
            while True:
                try:
                    Lq = np.linalg.cholesky(Q + shift * np.eye(Q.shape[0]))
                    if Q.shape[0]:
                        dmin = float(np.diag(Lq).min())
                        if dmin * dmin <= 1e-10 * max(scale, 1e-6):
                            raise np.linalg.LinAlgError
                    break
                except np.linalg.LinAlgError:
                    shift = max(1e-10 * max(scale, 1.0), shift * 10.0)
                    if shift > 1e6:
                        raise FactorizationError("objective block cannot be regularized")
            if shift > 0.0:
                st.H[v_idx, v_idx] += shift
                worst_reg = max(worst_reg, shift)
                Lq = np.linalg.cholesky(st.H[np.ix_(v_idx, v_idx)])
            relax.parts.append(StagePartition(v_idx, y_idx, Lq))
        _assemble_rows(relax, st)
    relax.regularization = worst_reg
    _assemble_static(relax)
    return relax


def _assemble_rows(relax: QpRelaxation, st: ReducedStage) -> None:
    rows = []
    rhs = []
    eye = np.eye(st.n)
    for j in np.flatnonzero(np.isfinite(st.ub)):
        rows.append(eye[j])
        rhs.append(st.ub[j])
    for j in np.flatnonzero(np.isfinite(st.lb)):
        rows.append(-eye[j])
        rhs.append(-st.lb[j])
    for k in np.flatnonzero(np.isfinite(st.cu)):
        rows.append(st.E[k])
        rhs.append(st.cu[k])
    for k in np.flatnonzero(np.isfinite(st.cl)):
        rows.append(-st.E[k])
        rhs.append(-st.cl[k])
    if rows:
        relax.G.append(np.asarray(rows, dtype=float))
        relax.g.append(np.asarray(rhs, dtype=float))
    else:
        relax.G.append(np.zeros((0, st.n)))
        relax.g.append(np.zeros(0))


def _assemble_static(relax: QpRelaxation) -> None:
    """Constant part of the augmented Hessian: cost block plus equality terms."""
    stages = relax.stages
    inv_eps = 1.0 / relax.eps_reg
    for s, st in enumerate(stages):
        phi = st.H.copy() if st.n else np.zeros((0, 0))
        if st.L.size:
            phi += inv_eps * (st.L.T @ st.L)
        if st.Fd is not None and st.Fd.size:
            phi += inv_eps * (st.Fd.T @ st.Fd)
        if s > 0 and stages[s - 1].dyn_out is not None:
            out = stages[s - 1].dyn_out
            phi[out, out] += inv_eps
        relax.phi_static.append(phi)
        if s < len(stages) - 1:
            nxt = stages[s + 1]
            off = np.zeros((nxt.n, st.n))
            if st.Fd is not None and st.Fd.size and st.dyn_out is not None:
                off[st.dyn_out, :] = -inv_eps * st.Fd
            relax.phi_off.append(off)


# ---------------------------------------------------------------------------
# Block-tridiagonal Cholesky
# ---------------------------------------------------------------------------


class BlockCholesky:
    """Cholesky recursion over the stage-coupled block-tridiagonal matrix."""

    def __init__(self, diag: list[np.ndarray], off: list[np.ndarray]):
        self.Ld: list[np.ndarray] = []
        self.Lo: list[np.ndarray] = []
        S = diag[0]
        last = len(diag) - 1
        for s in range(last + 1):
            try:
                Ld = np.linalg.cholesky(S) if S.size else np.zeros_like(S)
            except np.linalg.LinAlgError as exc:
                raise FactorizationError(f"stage {s} block not positive definite") from exc
            self.Ld.append(Ld)
            if s < last:
                O = off[s]
                if O.size and Ld.size:
                    Lo = solve_triangular(Ld, O.T, lower=True).T
                else:
                    Lo = np.zeros_like(O)
                self.Lo.append(Lo)
                S = diag[s + 1] - Lo @ Lo.T
        # non-empty blocks must be strictly positive definite
        for Ld in self.Ld:
            if Ld.size and np.diag(Ld).min() <= 0.0:
                raise FactorizationError("zero pivot in block factorization")

    def solve(self, rhs: list[np.ndarray]) -> list[np.ndarray]:
        n = len(rhs)
        y: list[np.ndarray] = []
        for s in range(n):
            b = rhs[s].copy()
            if s > 0 and self.Lo[s - 1].size:
                b -= self.Lo[s - 1] @ y[s - 1]
            y.append(solve_triangular(self.Ld[s], b, lower=True) if b.size else b)
        x = [np.zeros_like(v) for v in rhs]
        for s in range(n - 1, -1, -1):
            b = y[s]
            if s < n - 1 and self.Lo[s].size:
                b = b - self.Lo[s].T @ x[s + 1]
            x[s] = solve_triangular(self.Ld[s], b, lower=True, trans="T") if b.size else b
        return x


# ---------------------------------------------------------------------------
# Residuals and dual quantities
# ---------------------------------------------------------------------------


@dataclass
class Residuals:
    r_z: list[np.ndarray]
    r_ld: list[np.ndarray]
    r_ll: list[np.ndarray]
    r_mu: list[np.ndarray]
    norm: float


def compute_residuals(relax: QpRelaxation, it: IpmIterate) -> Residuals:
    stages = relax.stages
    N = relax.N
    r_z, r_ld, r_ll, r_mu = [], [], [], []
    worst = 0.0
    for s, st in enumerate(stages):
        rz = st.H @ it.z[s] + st.h if st.n else np.zeros(0)
        if relax.G[s].size:
            rz = rz + relax.G[s].T @ it.mu[s]
        if st.L.size:
            rz = rz + st.L.T @ it.lam_loc[s]
        if s < N and st.Fd is not None and st.Fd.size:
            rz = rz + st.Fd.T @ it.lam_dyn[s]
        if s > 0 and stages[s - 1].dyn_out is not None and it.lam_dyn[s - 1].size:
            rz[stages[s - 1].dyn_out] -= it.lam_dyn[s - 1]
        r_z.append(rz)
        rll = st.L @ it.z[s] - st.b_loc if st.L.size else np.zeros(0)
        r_ll.append(rll)
        if s < N and st.ad is not None:
            rld = (st.Fd @ it.z[s] if st.Fd.size else 0.0) + st.ad
            rld = rld - it.z[s + 1][st.dyn_out]
            r_ld.append(np.atleast_1d(rld))
        rmu = (relax.G[s] @ it.z[s] if relax.G[s].size else np.zeros(0)) - relax.g[s] + it.s[s]
        r_mu.append(rmu)
        for arr in (rz, rll, rmu):
            if arr.size:
                worst = max(worst, float(np.abs(arr).max()))
        if s < N and r_ld[s].size:
            worst = max(worst, float(np.abs(r_ld[s]).max()))
    return Residuals(r_z, r_ld, r_ll, r_mu, worst)


def _hat_gradient(relax: QpRelaxation, mu, lam_dyn, lam_loc) -> list[np.ndarray]:
    """Per-stage gradient h + G'mu + F'lam, before the v/y restriction."""
    stages = relax.stages
    N = relax.N
    out = []
    for s, st in enumerate(stages):
        vec = st.h.copy() if st.n else np.zeros(0)
        if relax.G[s].size:
            vec += relax.G[s].T @ mu[s]
        if st.L.size:
            vec += st.L.T @ lam_loc[s]
        if s < N and st.Fd is not None and st.Fd.size:
            vec += st.Fd.T @ lam_dyn[s]
        if s > 0 and stages[s - 1].dyn_out is not None and lam_dyn[s - 1].size:
            vec[stages[s - 1].dyn_out] -= lam_dyn[s - 1]
        out.append(vec)
    return out


def dual_objective(relax: QpRelaxation, mu, lam_dyn, lam_loc) -> float:
    """Dual objective: -(1/2)||h_v + Gv'mu + Fv'lam||^2 in the Q-inverse norm,
    minus the linear terms g'mu + f'lam, evaluated with the stage-wise
    Cholesky factors of the quadratic block.  Includes the constant carried
    over from eliminated variables so values compare against the primal."""
    grad = _hat_gradient(relax, mu, lam_dyn, lam_loc)
    quad = 0.0
    lin = 0.0
    for s, st in enumerate(relax.stages):
        part = relax.parts[s]
        if part.v_idx.size:
            hv = grad[s][part.v_idx]
            t = solve_triangular(part.Q_chol, hv, lower=True)
            quad += float(t @ t)
        if relax.g[s].size:
            lin += float(relax.g[s] @ mu[s])
        if st.b_loc.size:
            lin += float(st.b_loc @ lam_loc[s])
        if s < relax.N and st.ad is not None and st.ad.size:
            lin += float(-st.ad @ lam_dyn[s])
    return relax.const - 0.5 * quad - lin


def dual_equality_residual(relax: QpRelaxation, mu, lam_dyn, lam_loc) -> tuple[list[np.ndarray], float]:
    """Residual of the dual equality constraint on the linear-only variables."""
    grad = _hat_gradient(relax, mu, lam_dyn, lam_loc)
    parts = []
    norm = 0.0
    for s, _ in enumerate(relax.stages):
        ry = grad[s][relax.parts[s].y_idx]
        parts.append(ry)
        if ry.size:
            norm = max(norm, float(np.abs(ry).max()))
    return parts, norm


def dual_bound_corrected(relax: QpRelaxation, mu, lam_dyn, lam_loc) -> tuple[float, float, float]:
    """Dual objective plus a sound lower bound valid without dual feasibility.

    At an inexact point the dual equality residual r_y leaks value r_y'y; the
    worst case of that term over the y variables' boxes is subtracted, so the
    corrected value lower-bounds the objective of every primal-feasible point
    even before a projection has restored feasibility.  Returns (psi,
    corrected bound, residual norm).
    """
    psi = dual_objective(relax, mu, lam_dyn, lam_loc)
    ry_parts, ry_norm = dual_equality_residual(relax, mu, lam_dyn, lam_loc)
    corr = 0.0
    for s, st in enumerate(relax.stages):
        y_idx = relax.parts[s].y_idx
        if not y_idx.size:
            continue
        r = ry_parts[s]
        act = np.abs(r) > 1e-14
        if not act.any():
            continue
        lo = st.lb[y_idx][act]
        hi = st.ub[y_idx][act]
        ra = r[act]
        with np.errstate(invalid="ignore"):
            worst = np.where(ra > 0, ra * lo, ra * hi)
        worst[np.isnan(worst)] = -np.inf
        corr += float(worst.sum())
    return psi, psi + corr, ry_norm


def _farkas_from_multipliers(relax: QpRelaxation, mu, lam_dyn, lam_loc, floor_scale: float) -> bool:
    """Multiplier-ray infeasibility certificate.

    With u = G'mu + F'lam, every z in the variable boxes satisfies
    z'u <= sum_j sup of u_j z_j over the box, while feasibility of the rows
    would force z'u <= g'mu + f'lam.  When the box bound is strictly below
    -(g'mu + f'lam), no primal point can satisfy the constraints.
    """
    scale = 0.0
    for v in list(mu) + list(lam_dyn) + list(lam_loc):
        if v.size:
            scale = max(scale, float(np.abs(v).max()))
    if scale <= floor_scale:
        return False
    grad = _hat_gradient(relax, mu, lam_dyn, lam_loc)
    box_mass = 0.0
    lin = 0.0
    for s, st in enumerate(relax.stages):
        if st.n:
            u = grad[s] - st.h
            with np.errstate(invalid="ignore"):
                contrib = np.maximum(u * st.lb, u * st.ub)
            # an unbounded side blocks the certificate unless the ray
            # component there is zero to (tight) numerical tolerance
            near_zero = np.abs(u) <= 1e-10 * scale
            contrib[near_zero] = 0.0
            contrib[np.isnan(contrib)] = np.inf
            box_mass += float(contrib.sum())
        if relax.g[s].size:
            lin += float(relax.g[s] @ mu[s])
        if st.b_loc.size:
            lin += float(st.b_loc @ lam_loc[s])
        if s < relax.N and st.ad is not None and st.ad.size:
            lin += float(-st.ad @ lam_dyn[s])
    if not np.isfinite(box_mass):
        return False
    return box_mass < -lin - 1e-6 * scale


def _farkas_certificate(relax: QpRelaxation, it: IpmIterate, options: IpmOptions,
                        prev: IpmIterate | None = None) -> bool:
    """Certificate test on the current multipliers and, when available, on the
    step direction (differences cancel converged multiplier components, which
    isolates the recession ray much earlier)."""
    if _farkas_from_multipliers(relax, it.mu, it.lam_dyn, it.lam_loc, 1e3):
        return True
    if prev is None:
        return False
    dmu = [np.maximum(a - b, 0.0) for a, b in zip(it.mu, prev.mu)]
    dld = [a - b for a, b in zip(it.lam_dyn, prev.lam_dyn)]
    dll = [a - b for a, b in zip(it.lam_loc, prev.lam_loc)]
    return _farkas_from_multipliers(relax, dmu, dld, dll, 1e2)


# ---------------------------------------------------------------------------
# Iteration machinery
# ---------------------------------------------------------------------------


def make_start(relax: QpRelaxation, warm: list[np.ndarray] | None = None) -> IpmIterate:
    """Interior starting point: clipped primal guess, unit multipliers/slacks."""
    z = []
    for s, st in enumerate(relax.stages):
        guess = np.zeros(st.n) if warm is None else warm[s][st.orig_idx]
        lo = np.where(np.isfinite(st.lb), st.lb, -1e20)
        hi = np.where(np.isfinite(st.ub), st.ub, 1e20)
        z.append(np.clip(guess, lo, hi))
    lam_dyn = [
        np.zeros(st.ad.size if st.ad is not None else 0) for st in relax.stages[:-1]
    ]
    lam_loc = [np.zeros(st.b_loc.size) for st in relax.stages]
    mu = [np.ones(gv.size) for gv in relax.g]
    s = [np.ones(gv.size) for gv in relax.g]
    it = IpmIterate(z, lam_dyn, lam_loc, mu, s, tau=1.0)
    it.tau = it.comp()
    return it


def _weights(it: IpmIterate, options: IpmOptions) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Matrix weights (clipped 1/w) and right-hand-side weights per stage."""
    mat_w, rhs_w = [], []
    with np.errstate(over="ignore", divide="ignore"):
        for w in it.w:
            if w.size:
                mat_w.append(1.0 / np.clip(w, options.w_min, options.w_max))
                rhs_w.append(np.where(w <= options.w_min, 1.0 / options.w_min, 1.0 / w))
            else:
                mat_w.append(w)
                rhs_w.append(w)
    return mat_w, rhs_w


def build_factorization(relax: QpRelaxation, it: IpmIterate, options: IpmOptions) -> tuple[BlockCholesky, list[np.ndarray]]:
    """Factor the classification-weighted augmented Hessian; one shifted retry."""
    mat_w, rhs_w = _weights(it, options)
    diag = []
    for s, st in enumerate(relax.stages):
        phi = relax.phi_static[s].copy()
        if relax.G[s].size:
            phi += relax.G[s].T @ (relax.G[s] * mat_w[s][:, None])
        diag.append(phi)
    try:
        fact = BlockCholesky(diag, relax.phi_off)
    except FactorizationError:
        shifted = []
        for phi in diag:
            scale = float(np.abs(np.diag(phi)).max()) if phi.size else 0.0
            shifted.append(phi + 1e-8 * (1.0 + scale) * np.eye(phi.shape[0]))
        fact = BlockCholesky(shifted, relax.phi_off)
    return fact, rhs_w


def _direction(
    relax: QpRelaxation,
    it: IpmIterate,
    res: Residuals,
    fact: BlockCholesky,
    rhs_w: list[np.ndarray],
    options: IpmOptions,
):
    stages = relax.stages
    N = relax.N
    inv_eps = 1.0 / relax.eps_reg
    rbar_mu = []
    for s, st in enumerate(stages):
        if it.mu[s].size:
            r_s = it.mu[s] * it.s[s] - it.tau
            rbar_mu.append(res.r_mu[s] - r_s / it.mu[s])
        else:
            rbar_mu.append(np.zeros(0))
    rhs = []
    for s, st in enumerate(stages):
        rb = res.r_z[s].copy()
        if st.L.size:
            rb += inv_eps * (st.L.T @ res.r_ll[s])
        if s < N and st.Fd is not None and st.Fd.size:
            rb += inv_eps * (st.Fd.T @ res.r_ld[s])
        if s > 0 and stages[s - 1].dyn_out is not None and res.r_ld[s - 1].size:
            rb[stages[s - 1].dyn_out] -= inv_eps * res.r_ld[s - 1]
        if relax.G[s].size:
            rb += relax.G[s].T @ (rhs_w[s] * rbar_mu[s])
        rhs.append(-rb)
    dz = fact.solve(rhs)
    d_ld, d_ll, d_mu, d_s = [], [], [], []
    for s, st in enumerate(stages):
        if s < N and st.ad is not None:
            v = res.r_ld[s] + (st.Fd @ dz[s] if st.Fd.size else 0.0) - dz[s + 1][st.dyn_out]
            d_ld.append(inv_eps * np.atleast_1d(v))
        d_ll.append(inv_eps * (res.r_ll[s] + st.L @ dz[s]) if st.L.size else np.zeros(0))
        if it.mu[s].size:
            dm = rhs_w[s] * (rbar_mu[s] + relax.G[s] @ dz[s])
            r_s = it.mu[s] * it.s[s] - it.tau
            d_mu.append(dm)
            d_s.append(-(it.s[s] * dm + r_s) / it.mu[s])
        else:
            d_mu.append(np.zeros(0))
            d_s.append(np.zeros(0))
    return dz, d_ld, d_ll, d_mu, d_s


def _apply_step(it: IpmIterate, direction, options: IpmOptions, p_total: int) -> IpmIterate:
    dz, d_ld, d_ll, d_mu, d_s = direction
    alpha = 1.0
    for mu_s, dm in zip(it.mu, d_mu):
        neg = dm < 0
        if np.any(neg):
            alpha = min(alpha, options.boundary_frac * float((-mu_s[neg] / dm[neg]).min()))
    for s_s, ds in zip(it.s, d_s):
        neg = ds < 0
        if np.any(neg):
            alpha = min(alpha, options.boundary_frac * float((-s_s[neg] / ds[neg]).min()))
    new = IpmIterate(
        [zs + alpha * d for zs, d in zip(it.z, dz)],
        [ls + alpha * d for ls, d in zip(it.lam_dyn, d_ld)],
        [ls + alpha * d for ls, d in zip(it.lam_loc, d_ll)],
        [ms + alpha * d for ms, d in zip(it.mu, d_mu)],
        [ss + alpha * d for ss, d in zip(it.s, d_s)],
        it.tau,
    )
    if p_total:
        new.tau = options.sigma * new.comp()
    else:
        new.tau = 0.0
    return new


def ipm_step(iterate: IpmIterate, relax: QpRelaxation, options: IpmOptions | None = None) -> IpmIterate:
    """One interior-point iteration from the given interior point."""
    options = options or IpmOptions()
    res = compute_residuals(relax, iterate)
    fact, rhs_w = build_factorization(relax, iterate, options)
    direction = _direction(relax, iterate, res, fact, rhs_w, options)
    return _apply_step(iterate, direction, options, relax.total_ineq)


def project_dual(
    it: IpmIterate,
    relax: QpRelaxation,
    fact: BlockCholesky,
    rhs_w: list[np.ndarray],
    options: IpmOptions,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray], bool]:
    """Weighted projection of the multipliers onto the dual equality manifold.

    Reuses the factorization of the latest iteration; only forward/backward
    substitutions are performed.  Acceptance requires strictly positive
    inequality multipliers and a dual equality residual below tolerance.
    """
    stages = relax.stages
    N = relax.N
    inv_eps = 1.0 / relax.eps_reg
    ry_parts, _ = dual_equality_residual(relax, it.mu, it.lam_dyn, it.lam_loc)
    rhs = []
    for s, st in enumerate(stages):
        vec = np.zeros(st.n)
        y_idx = relax.parts[s].y_idx
        if y_idx.size:
            vec[y_idx] = ry_parts[s]
        rhs.append(-vec)
    dz = fact.solve(rhs)
    mu_new, ld_new, ll_new = [], [], []
    ok = True
    for s, st in enumerate(stages):
        if s < N and st.ad is not None:
            v = (st.Fd @ dz[s] if st.Fd.size else 0.0) - dz[s + 1][st.dyn_out]
            ld_new.append(it.lam_dyn[s] + inv_eps * np.atleast_1d(v))
        ll_new.append(it.lam_loc[s] + inv_eps * (st.L @ dz[s]) if st.L.size else np.zeros(0))
        if it.mu[s].size:
            dm = rhs_w[s] * (relax.G[s] @ dz[s])
            cand = it.mu[s] + dm
            if np.any(cand <= 0.0):
                ok = False
            mu_new.append(cand)
        else:
            mu_new.append(np.zeros(0))
    if ok:
        _, norm = dual_equality_residual(relax, mu_new, ld_new, ll_new)
        ok = norm < options.tol
    return mu_new, ld_new, ll_new, ok


def solve_relaxation(
    relax: QpRelaxation,
    warm: list[np.ndarray] | None = None,
    upper_bound: float = math.inf,
    options: IpmOptions | None = None,
) -> QpOutcome:
    """Solve one convex relaxation, terminating early against the upper bound.

    The loop checks the current dual objective against the (effective) upper
    bound each iteration; if it exceeds the bound at a dual-feasible point the
    node is pruned, otherwise a projection attempt tries to restore dual
    feasibility before the next iteration.  Divergence of the dual objective
    with bounded complementarity certifies infeasibility.
    """
    options = options or IpmOptions()
    stats = QpStats()
    if relax.total_vars == 0:
        traj = relax.expand([np.zeros(0) for _ in relax.stages])
        return QpOutcome(
            QpStatus.OPTIMAL,
            trajectory=traj,
            objective=relax.const,
            iterate=make_start(relax),
            stats=stats,
        )

    it = make_start(relax, warm)
    p_total = relax.total_ineq
    comp0 = sum(float(m @ s) for m, s in zip(it.mu, it.s))
    ub_eff = min(upper_bound, options.psi_max) if options.early_termination else options.psi_max

    best = it
    prev_it: IpmIterate | None = None
    polish_left = options.polish_iters
    prev_comp = math.inf
    best_res = math.inf
    best_psi = -math.inf
    since_improve = 0
    for _ in range(options.max_iters):
        res = compute_residuals(relax, it)
        comp_inf = it.comp_inf()
        if max(it.tau, comp_inf, res.norm) <= options.tol:
            stalled = comp_inf > 0.5 * prev_comp or polish_left <= 0
            if comp_inf <= options.comp_polish * options.tol or stalled:
                traj = relax.expand(it.z)
                return QpOutcome(
                    QpStatus.OPTIMAL,
                    trajectory=traj,
                    objective=relax.primal_objective(it.z),
                    iterate=it,
                    stats=stats,
                )
            polish_left -= 1
        prev_comp = comp_inf
        psi, psi_lb, ry_norm = dual_bound_corrected(relax, it.mu, it.lam_dyn, it.lam_loc)
        if res.norm < 0.75 * best_res:
            best_res = res.norm
            since_improve = 0
        elif psi_lb > best_psi + max(1e-6, 1e-6 * abs(best_psi)):
            since_improve = 0
        else:
            since_improve += 1
        best_psi = max(best_psi, psi_lb)
        if (
            since_improve >= options.stall_iters
            and res.norm > options.tol
            and comp_inf < options.tol * options.tol
        ):
            # plateaued residual and dual bound with collapsed
            # complementarity: the solve will not conclude either way
            return QpOutcome(QpStatus.ITERATION_LIMIT, iterate=best, stats=stats)
        fact = None
        rhs_w = None
        if psi_lb > ub_eff:
            return _bound_exceeded(psi_lb, it, options, stats)
        if psi > ub_eff and stats.projections_attempted < options.projection_limit:
            # promising but dual-infeasible point: project and re-test
            fact, rhs_w = build_factorization(relax, it, options)
            stats.factorizations += 1
            stats.projections_attempted += 1
            mu_new, ld_new, ll_new, ok = project_dual(it, relax, fact, rhs_w, options)
            if ok:
                stats.projections_accepted += 1
                it.mu, it.lam_dyn, it.lam_loc = mu_new, ld_new, ll_new
                _, psi_lb_new, _ = dual_bound_corrected(relax, it.mu, it.lam_dyn, it.lam_loc)
                if psi_lb_new > ub_eff:
                    return _bound_exceeded(psi_lb_new, it, options, stats)
                # multipliers moved: residuals and weights are stale
                res = compute_residuals(relax, it)
                fact = None
        comp_now = sum(float(m @ s) for m, s in zip(it.mu, it.s))
        if comp_now <= comp0 and it.mu_inf() > options.mu_max and psi_lb > options.psi_max:
            return QpOutcome(
                QpStatus.INFEASIBLE, certificate="multiplier_divergence", iterate=it, stats=stats
            )
        if res.norm > options.tol and _farkas_certificate(relax, it, options, prev_it):
            return QpOutcome(
                QpStatus.INFEASIBLE, certificate="farkas_ray", iterate=it, stats=stats
            )
        if fact is None:
            try:
                fact, rhs_w = build_factorization(relax, it, options)
            except FactorizationError:
                return QpOutcome(QpStatus.ITERATION_LIMIT, iterate=best, stats=stats)
            stats.factorizations += 1
        direction = _direction(relax, it, res, fact, rhs_w, options)
        prev_it = it
        it = _apply_step(it, direction, options, p_total)
        stats.iterations += 1
        best = it
    return QpOutcome(QpStatus.ITERATION_LIMIT, iterate=best, stats=stats)


def _bound_exceeded(psi: float, it: IpmIterate, options: IpmOptions, stats: QpStats) -> QpOutcome:
    if psi > options.psi_max:
        return QpOutcome(QpStatus.INFEASIBLE, certificate="dual_unbounded", iterate=it, stats=stats)
    return QpOutcome(QpStatus.EARLY_TERMINATED, dual_bound=psi, iterate=it, stats=stats)
