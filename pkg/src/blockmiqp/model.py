"""Stage-wise problem data for optimal-control structured MIQPs.

A problem is a horizon of stages, each carrying a quadratic cost block, the
dynamics map to the next stage, two-sided affine inequality rows and variable
bounds, plus the index set of integer-constrained controls.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

INF = float("inf")

#: bounds with magnitude at or above this are treated as infinite by default
DEFAULT_EPS_MAX = 1e12


class InstanceError(ValueError):
    """Malformed instance data; carries the offending stage and field."""

    def __init__(self, message: str, stage: int | None = None, fieldname: str | None = None):
        loc = ""
        if stage is not None:
            loc += f" (stage {stage}"
            loc += f", field '{fieldname}')" if fieldname else ")"
        super().__init__(message + loc)
        self.stage = stage
        self.fieldname = fieldname


class InfeasibleBoundsError(ValueError):
    """Raised when crossing bounds make a reduction impossible."""

    def __init__(self, stage: int, index: int, kind: str = "variable"):
        super().__init__(f"crossing {kind} bounds at stage {stage}, index {index}")
        self.stage = stage
        self.index = index
        self.kind = kind


def _as_matrix(value, rows: int, cols: int, stage: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.size != rows * cols:
        raise InstanceError(
            f"expected {rows}x{cols} entries, got {arr.size}", stage, name
        )
    return np.ascontiguousarray(arr.reshape(rows, cols))


def _as_vector(value, n: int, stage: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).ravel()
    if arr.size != n:
        raise InstanceError(f"expected length {n}, got {arr.size}", stage, name)
    return np.ascontiguousarray(arr)


@dataclass
class StageData:
    """Data of one stage: cost, dynamics to the next stage, rows and bounds.

    Dynamics arrays ``A``, ``B``, ``a`` are absent on the terminal stage.
    ``int_idx`` indexes into the control block (``0 .. nu-1``).
    """

    nx: int
    nu: int
    nc: int
    H: np.ndarray
    q: np.ndarray
    r: np.ndarray
    C: np.ndarray
    D: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    c_lb: np.ndarray
    c_ub: np.ndarray
    int_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    a: np.ndarray | None = None

    @property
    def nz(self) -> int:
        return self.nx + self.nu

    @property
    def has_dynamics(self) -> bool:
        return self.A is not None

    @property
    def E(self) -> np.ndarray:
        """Inequality matrix over the full stage variable ``z = [x; u]``."""
        return np.hstack([self.C, self.D]) if self.nc else np.zeros((0, self.nz))

    @property
    def F(self) -> np.ndarray:
        """Dynamics matrix over the full stage variable ``z = [x; u]``."""
        assert self.A is not None and self.B is not None
        return np.hstack([self.A, self.B])

    def int_z_idx(self) -> np.ndarray:
        """Integer indices shifted into z-coordinates (controls follow states)."""
        return self.int_idx + self.nx

    def validate(self, stage: int) -> None:
        if self.nx < 0 or self.nu < 0 or self.nc < 0:
            raise InstanceError("negative dimension", stage, "nx/nu/nc")
        nz = self.nz
        if self.H.shape != (nz, nz):
            raise InstanceError(f"H must be {nz}x{nz}", stage, "H")
        scale = max(1.0, float(np.abs(self.H).max()) if self.H.size else 0.0)
        if self.H.size and np.abs(self.H - self.H.T).max() > 1e-9 * scale:
            raise InstanceError("H is not symmetric", stage, "H")
        for name, vec, n in (
            ("q", self.q, self.nx),
            ("r", self.r, self.nu),
            ("z_lb", self.z_lb, nz),
            ("z_ub", self.z_ub, nz),
            ("c_lb", self.c_lb, self.nc),
            ("c_ub", self.c_ub, self.nc),
        ):
            if vec.shape != (n,):
                raise InstanceError(f"{name} must have length {n}", stage, name)
        if self.C.shape != (self.nc, self.nx):
            raise InstanceError(f"C must be {self.nc}x{self.nx}", stage, "C")
        if self.D.shape != (self.nc, self.nu):
            raise InstanceError(f"D must be {self.nc}x{self.nu}", stage, "D")
        if np.any(self.z_lb > self.z_ub):
            raise InstanceError("z_lb exceeds z_ub", stage, "z_lb")
        if np.any(self.c_lb > self.c_ub):
            raise InstanceError("c_lb exceeds c_ub", stage, "c_lb")
        ints = np.asarray(self.int_idx, dtype=int)
        if ints.size:
            if ints.min() < 0 or ints.max() >= self.nu:
                raise InstanceError("int_idx out of control range", stage, "int_idx")
            if np.unique(ints).size != ints.size:
                raise InstanceError("duplicate entries in int_idx", stage, "int_idx")
        if self.has_dynamics:
            if self.A is None or self.B is None or self.a is None:
                raise InstanceError("incomplete dynamics block", stage, "A/B/a")
            nxp = self.A.shape[0]
            if self.A.shape != (nxp, self.nx):
                raise InstanceError("A shape inconsistent", stage, "A")
            if self.B.shape != (nxp, self.nu):
                raise InstanceError(f"B must be {nxp}x{self.nu}", stage, "B")
            if self.a.shape != (nxp,):
                raise InstanceError(f"a must have length {nxp}", stage, "a")
        # PSD is advisory at this point: the relaxation solver enforces the
        # strict condition it actually needs after the objective partition.
        if self.H.size:
            w = np.linalg.eigvalsh(0.5 * (self.H + self.H.T))
            if w.min() < -1e-9 * max(1.0, abs(w).max()):
                logger.warning(
                    "stage %d cost matrix has negative eigenvalue %.3e", stage, w.min()
                )

    def cost_gradient(self) -> np.ndarray:
        return np.concatenate([self.q, self.r])


@dataclass
class MiocpProblem:
    """A horizon of ``N + 1`` stages with inter-stage dynamics.

    Immutable by convention after construction; tightened copies are produced
    through :class:`blockmiqp.bounds.BoundState` and :func:`apply_bounds`.
    """

    N: int
    stages: list[StageData]
    name: str = "miqp"

    def __post_init__(self):
        if len(self.stages) != self.N + 1:
            raise InstanceError(f"expected {self.N + 1} stages, got {len(self.stages)}")
        for i, st in enumerate(self.stages):
            st.validate(i)
            if i < self.N:
                if not st.has_dynamics:
                    raise InstanceError("missing dynamics block", i, "A")
                nxp = st.A.shape[0]
                if nxp != self.stages[i + 1].nx:
                    raise InstanceError(
                        f"dynamics output dimension {nxp} does not match "
                        f"stage {i + 1} state count {self.stages[i + 1].nx}",
                        i,
                        "A",
                    )
            elif st.has_dynamics:
                raise InstanceError("terminal stage must not carry dynamics", i, "A")

    @property
    def num_integer(self) -> int:
        return sum(st.int_idx.size for st in self.stages)

    def integer_coords(self) -> list[tuple[int, int]]:
        """All (stage, z-index) pairs of integer-constrained variables."""
        out = []
        for i, st in enumerate(self.stages):
            for j in st.int_z_idx():
                out.append((i, int(j)))
        return out


@dataclass
class Trajectory:
    """One vector ``z_i = [x_i; u_i]`` per stage."""

    z: list[np.ndarray]

    def check_dims(self, problem: MiocpProblem) -> None:
        if len(self.z) != problem.N + 1:
            raise InstanceError(f"trajectory has {len(self.z)} stages, expected {problem.N + 1}")
        for i, (zi, st) in enumerate(zip(self.z, problem.stages)):
            if zi.shape != (st.nz,):
                raise InstanceError(f"stage vector has length {zi.size}, expected {st.nz}", i)

    def copy(self) -> "Trajectory":
        return Trajectory([zi.copy() for zi in self.z])


@dataclass
class FeasibilityReport:
    max_dyn_residual: float
    max_bound_violation: float
    max_ineq_violation: float
    max_integrality_gap: float
    feasible: bool

    def worst(self) -> float:
        return max(
            self.max_dyn_residual,
            self.max_bound_violation,
            self.max_ineq_violation,
            self.max_integrality_gap,
        )


def objective(problem: MiocpProblem, traj: Trajectory) -> float:
    """Quadratic-plus-linear stage cost summed over the horizon."""
    traj.check_dims(problem)
    total = 0.0
    for st, zi in zip(problem.stages, traj.z):
        total += 0.5 * float(zi @ st.H @ zi) + float(st.cost_gradient() @ zi)
    return total


def feasibility_report(problem: MiocpProblem, traj: Trajectory, tol: float) -> FeasibilityReport:
    """Exact constraint residual maxima of a trajectory.

    The integrality gap is the largest distance of an integer-indexed entry
    to its nearest integer.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    traj.check_dims(problem)
    dyn = 0.0
    bound = 0.0
    ineq = 0.0
    integ = 0.0
    for i, (st, zi) in enumerate(zip(problem.stages, traj.z)):
        if st.has_dynamics:
            res = traj.z[i + 1][: st.A.shape[0]] - (st.F @ zi + st.a)
            if res.size:
                dyn = max(dyn, float(np.abs(res).max()))
        viol = np.maximum(st.z_lb - zi, zi - st.z_ub)
        if viol.size:
            bound = max(bound, max(0.0, float(viol.max())))
        if st.nc:
            act = st.E @ zi
            rv = np.maximum(st.c_lb - act, act - st.c_ub)
            finite = rv[np.isfinite(rv)]
            if finite.size:
                ineq = max(ineq, max(0.0, float(finite.max())))
        for j in st.int_z_idx():
            integ = max(integ, abs(zi[j] - round(zi[j])))
    feasible = max(dyn, bound, ineq, integ) <= tol
    return FeasibilityReport(dyn, bound, ineq, integ, feasible)


# ---------------------------------------------------------------------------
# Instance document I/O (JSON text with "inf"/"-inf" markers)
# ---------------------------------------------------------------------------


def _decode_number(value) -> float:
    if isinstance(value, str):
        s = value.strip().lower()
        if s in ("inf", "+inf", "infinity"):
            return INF
        if s in ("-inf", "-infinity"):
            return -INF
        raise ValueError(f"unrecognized numeric string {value!r}")
    return float(value)


def _decode_array(value, stage: int, name: str) -> np.ndarray:
    try:
        flat = []
        stackk = [value]
        # accept flat row-major arrays or nested lists
        def walk(v):
            if isinstance(v, (list, tuple)):
                for item in v:
                    walk(item)
            else:
                flat.append(_decode_number(v))

        walk(value)
        return np.asarray(flat, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InstanceError(f"bad numeric array: {exc}", stage, name) from exc


def _encode_vector(vec: np.ndarray) -> list:
    out = []
    for v in vec:
        if math.isinf(v):
            out.append("inf" if v > 0 else "-inf")
        else:
            out.append(float(v))
    return out


def load_instance(text: str) -> MiocpProblem:
    """Parse an instance document into a validated problem."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceError(f"malformed document: {exc}") from exc
    if not isinstance(doc, dict) or "stages" not in doc or "N" not in doc:
        raise InstanceError("document must carry 'N' and 'stages'")
    N = int(doc["N"])
    raw_stages = doc["stages"]
    if len(raw_stages) != N + 1:
        raise InstanceError(f"expected {N + 1} stages, got {len(raw_stages)}")
    stages = []
    for i, raw in enumerate(raw_stages):
        try:
            nx, nu, nc = int(raw["nx"]), int(raw["nu"]), int(raw["nc"])
        except KeyError as exc:
            raise InstanceError(f"missing field {exc}", i) from exc
        nz = nx + nu
        get = lambda key: raw.get(key, [])
        st = StageData(
            nx=nx,
            nu=nu,
            nc=nc,
            H=_as_matrix(_decode_array(get("H"), i, "H"), nz, nz, i, "H"),
            q=_as_vector(_decode_array(get("q"), i, "q"), nx, i, "q"),
            r=_as_vector(_decode_array(get("r"), i, "r"), nu, i, "r"),
            C=_as_matrix(_decode_array(get("C"), i, "C"), nc, nx, i, "C"),
            D=_as_matrix(_decode_array(get("D"), i, "D"), nc, nu, i, "D"),
            z_lb=_as_vector(_decode_array(get("z_lb"), i, "z_lb"), nz, i, "z_lb"),
            z_ub=_as_vector(_decode_array(get("z_ub"), i, "z_ub"), nz, i, "z_ub"),
            c_lb=_as_vector(_decode_array(get("c_lb"), i, "c_lb"), nc, i, "c_lb"),
            c_ub=_as_vector(_decode_array(get("c_ub"), i, "c_ub"), nc, i, "c_ub"),
            int_idx=np.asarray(raw.get("int_idx", []), dtype=int),
        )
        if i < N:
            if "A" not in raw:
                raise InstanceError("missing dynamics block", i, "A")
            a_vec = _decode_array(raw.get("a", []), i, "a")
            nxp = a_vec.size
            st.A = _as_matrix(_decode_array(raw["A"], i, "A"), nxp, nx, i, "A")
            st.B = _as_matrix(_decode_array(raw["B"], i, "B"), nxp, nu, i, "B")
            st.a = _as_vector(a_vec, nxp, i, "a")
        stages.append(st)
    return MiocpProblem(N=N, stages=stages, name=str(doc.get("name", "miqp")))


def save_instance(problem: MiocpProblem) -> str:
    """Serialize a problem to the instance document format."""
    stages = []
    for st in problem.stages:
        raw = {
            "nx": st.nx,
            "nu": st.nu,
            "nc": st.nc,
            "H": [list(map(float, row)) for row in st.H],
            "q": _encode_vector(st.q),
            "r": _encode_vector(st.r),
            "C": [list(map(float, row)) for row in st.C],
            "D": [list(map(float, row)) for row in st.D],
            "z_lb": _encode_vector(st.z_lb),
            "z_ub": _encode_vector(st.z_ub),
            "c_lb": _encode_vector(st.c_lb),
            "c_ub": _encode_vector(st.c_ub),
            "int_idx": [int(j) for j in st.int_idx],
        }
        if st.has_dynamics:
            raw["A"] = [list(map(float, row)) for row in st.A]
            raw["B"] = [list(map(float, row)) for row in st.B]
            raw["a"] = _encode_vector(st.a)
        stages.append(raw)
    return json.dumps({"name": problem.name, "N": problem.N, "stages": stages}, indent=1)


def save_solution(status: str, objective_value: float | None, traj: Trajectory | None, stats: dict) -> str:
    """Solution document: status, objective, per-stage variables, run stats."""
    doc = {
        "status": status,
        "objective": None if objective_value is None else float(objective_value),
        "z": None if traj is None else [list(map(float, zi)) for zi in traj.z],
        "stats": stats,
    }
    return json.dumps(doc, indent=1)


# ---------------------------------------------------------------------------
# Reduction to a variable-eliminated relaxation
# ---------------------------------------------------------------------------


def _normalize_inf(vec: np.ndarray, eps_max: float) -> np.ndarray:
    out = vec.copy()
    out[out >= eps_max] = INF
    out[out <= -eps_max] = -INF
    return out


def reduce(problem: MiocpProblem, bounds, tol: float = 1e-9, eps_max: float = DEFAULT_EPS_MAX, eps_reg: float = 1e-8):
    """Eliminate fixed variables and dead rows; return the QP relaxation.

    Fixed variables (equal bounds) are substituted into costs, dynamics and
    rows.  A dynamics row whose output state is fixed turns into a stage-local
    equality on the remaining inputs.  Raises :class:`InfeasibleBoundsError`
    on crossing bounds or on a constant row that cannot hold.
    """
    from .qp import ReducedStage, partition_objective

    if bounds.infeasible:
        info = bounds.infeasible_info or (0, 0, "variable")
        raise InfeasibleBoundsError(info[0], info[1], info[2])

    N = problem.N
    feas_tol = 1e-7
    const = 0.0
    free_idx: list[np.ndarray] = []
    fixed_vals: list[np.ndarray] = []
    stages_out = []

    for i, st in enumerate(problem.stages):
        lb = _normalize_inf(bounds.z_lb[i], eps_max)
        ub = _normalize_inf(bounds.z_ub[i], eps_max)
        gap = ub - lb
        if np.any(gap < -tol):
            raise InfeasibleBoundsError(i, int(np.argmax(gap < -tol)))
        span = np.maximum(1.0, np.maximum(np.abs(lb), np.abs(ub)))
        span[~np.isfinite(span)] = 1.0
        fixed = gap <= 1e-12 * span
        value = np.zeros(st.nz)
        value[fixed] = 0.5 * (lb[fixed] + ub[fixed])
        free = np.flatnonzero(~fixed)
        free_idx.append(free)
        fixed_vals.append(value)

        h_full = st.cost_gradient()
        vf = value
        fmask = fixed
        const += 0.5 * float(vf @ st.H @ vf) + float(h_full[fmask] @ vf[fmask])
        H_red = st.H[np.ix_(free, free)].copy()
        h_red = h_full[free] + st.H[np.ix_(free, np.flatnonzero(fmask))] @ vf[fmask]

        E_full = np.hstack([st.C, bounds.D[i]]) if st.nc else np.zeros((0, st.nz))
        cl = _normalize_inf(bounds.c_lb[i], eps_max)
        cu = _normalize_inf(bounds.c_ub[i], eps_max)
        if st.nc:
            shift = E_full[:, fmask] @ vf[fmask]
            cl = cl - shift
            cu = cu - shift
            E_red = E_full[:, free]
            keep = []
            for k in range(st.nc):
                lo, hi = cl[k], cu[k]
                if not np.isfinite(lo) and not np.isfinite(hi):
                    continue
                if E_red.shape[1] == 0 or np.abs(E_red[k]).max() <= 1e-12:
                    if lo > feas_tol or hi < -feas_tol:
                        raise InfeasibleBoundsError(i, k, "row")
                    continue
                keep.append(k)
            keep = np.asarray(keep, dtype=int)
            E_red = E_red[keep]
            cl = cl[keep]
            cu = cu[keep]
        else:
            E_red = np.zeros((0, free.size))
            cl = np.zeros(0)
            cu = np.zeros(0)

        int_mask_full = np.zeros(st.nz, dtype=bool)
        int_mask_full[st.int_z_idx()] = True
        int_pos = np.flatnonzero(int_mask_full[free])

        stages_out.append(
            ReducedStage(
                n=free.size,
                H=H_red,
                h=h_red,
                lb=lb[free],
                ub=ub[free],
                E=E_red,
                cl=cl,
                cu=cu,
                L=np.zeros((0, free.size)),
                b_loc=np.zeros(0),
                Fd=None,
                ad=None,
                dyn_out=None,
                orig_idx=free,
                fixed_template=value.copy(),
                int_pos=int_pos,
            )
        )

    for i in range(N):
        st = problem.stages[i]
        free_i = free_idx[i]
        fixed_i = np.setdiff1d(np.arange(st.nz), free_i)
        F_full = st.F
        a_fold = st.a + F_full[:, fixed_i] @ fixed_vals[i][fixed_i]
        F_free = F_full[:, free_i]
        nxt_free = free_idx[i + 1]
        nxt_vals = fixed_vals[i + 1]
        nxp = st.A.shape[0]
        pos_in_next = -np.ones(problem.stages[i + 1].nz, dtype=int)
        pos_in_next[nxt_free] = np.arange(nxt_free.size)
        out_free = [j for j in range(nxp) if pos_in_next[j] >= 0]
        out_fixed = [j for j in range(nxp) if pos_in_next[j] < 0]
        red = stages_out[i]
        red.Fd = F_free[out_free, :] if out_free else np.zeros((0, free_i.size))
        red.ad = a_fold[out_free] if out_free else np.zeros(0)
        red.dyn_out = pos_in_next[out_free] if out_free else np.zeros(0, dtype=int)
        if out_fixed:
            L_rows = F_free[out_fixed, :]
            b_rows = nxt_vals[out_fixed] - a_fold[out_fixed]
            keep = []
            for k in range(len(out_fixed)):
                if L_rows.shape[1] == 0 or np.abs(L_rows[k]).max() <= 1e-12:
                    if abs(b_rows[k]) > feas_tol * max(1.0, abs(nxt_vals[out_fixed[k]])):
                        raise InfeasibleBoundsError(i, out_fixed[k], "dynamics")
                else:
                    keep.append(k)
            red.L = L_rows[keep] if keep else np.zeros((0, free_i.size))
            red.b_loc = b_rows[keep] if keep else np.zeros(0)

    return partition_objective(stages_out, const, eps_reg)


def apply_bounds(problem: MiocpProblem, bounds) -> MiocpProblem:
    """Materialize a tightened problem from a bound state (bounds and D)."""
    stages = []
    for i, st in enumerate(problem.stages):
        stages.append(
            StageData(
                nx=st.nx,
                nu=st.nu,
                nc=st.nc,
                H=st.H.copy(),
                q=st.q.copy(),
                r=st.r.copy(),
                C=st.C.copy(),
                D=bounds.D[i].copy(),
                z_lb=bounds.z_lb[i].copy(),
                z_ub=bounds.z_ub[i].copy(),
                c_lb=bounds.c_lb[i].copy(),
                c_ub=bounds.c_ub[i].copy(),
                int_idx=st.int_idx.copy(),
                A=None if st.A is None else st.A.copy(),
                B=None if st.B is None else st.B.copy(),
                a=None if st.a is None else st.a.copy(),
            )
        )
    return MiocpProblem(N=problem.N, stages=stages, name=problem.name)
