"""Case-study generators: big-M motion planning and cart-pole with soft walls."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import INF, MiocpProblem, StageData


@dataclass
class MotionPlanningConfig:
    """Point-mass planner reaching a goal while avoiding axis-aligned boxes.

    One binary per stage flags the arrival step; four binaries per obstacle
    and stage select the side on which the position escapes the box.
    """

    N: int = 6
    T_s: float = 1.0
    obstacles: list[tuple[float, float, float, float]] = field(
        default_factory=lambda: [(4.0, 6.0, 4.0, 6.0)]
    )
    x_goal: tuple[float, float, float, float] = (10.0, 10.0, 0.0, 0.0)
    big_M: float = 50.0
    q_weight: float = 1e-2     # state-error weight (diagonal)
    r_weight: float = 1e-2     # acceleration weight (diagonal)
    time_weight: float = 1.0   # arrival-step cost scale
    x0: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    p_bounds: tuple[float, float] = (-2.0, 12.0)
    v_max: float = 4.0
    a_max: float = 3.0

    def validate(self) -> None:
        for (x1, x2, y1, y2) in self.obstacles:
            if not (x1 < x2 and y1 < y2):
                raise ValueError("obstacle box must have positive extent")
        span = max(
            self.p_bounds[1] - self.p_bounds[0],
            abs(self.x_goal[0]) + abs(self.x_goal[1]) + 1.0,
        )
        if self.big_M <= span:
            raise ValueError("big_M must exceed the workspace diameter")
        if self.q_weight < 0 or self.r_weight < 0:
            raise ValueError("weights must be nonnegative")

    @property
    def n_obs(self) -> int:
        return len(self.obstacles)

    def objective_offset(self) -> float:
        """Constant dropped when the squared goal distance is expanded."""
        goal = np.asarray(self.x_goal)
        return float((self.N + 1) * self.q_weight * (goal @ goal))

    def true_objective(self, raw: float) -> float:
        return raw + self.objective_offset()


def build_motion_planning(cfg: MotionPlanningConfig) -> MiocpProblem:
    """Assemble the motion-planning MIQP.

    States are (px, py, vx, vy, arrived); stage controls are the two
    accelerations plus an arrival binary, and from stage 1 on the per-obstacle
    side binaries whose stage rows carve out the box exterior.
    """
    cfg.validate()
    N = cfg.N
    Ts = cfg.T_s
    M = cfg.big_M
    K = cfg.n_obs
    goal = np.asarray(cfg.x_goal, dtype=float)
    stages = []
    for i in range(N + 1):
        nx = 5
        has_motion = i < N          # accelerations and arrival binary
        n_obs_bins = 4 * K if i >= 1 else 0
        nu = (3 if has_motion else 0) + n_obs_bins
        nz = nx + nu
        obs_off = nx + (3 if has_motion else 0)   # z-index of first side binary

        H = np.zeros((nz, nz))
        H[0, 0] = H[1, 1] = H[2, 2] = H[3, 3] = 2.0 * cfg.q_weight
        q = np.zeros(nx)
        q[:4] = -2.0 * cfg.q_weight * goal
        r = np.zeros(nu)
        if has_motion:
            H[nx, nx] = H[nx + 1, nx + 1] = 2.0 * cfg.r_weight
            r[2] = cfg.time_weight * i

        lb = np.full(nz, -INF)
        ub = np.full(nz, INF)
        lb[0] = lb[1] = cfg.p_bounds[0]
        ub[0] = ub[1] = cfg.p_bounds[1]
        lb[2] = lb[3] = -cfg.v_max
        ub[2] = ub[3] = cfg.v_max
        lb[4], ub[4] = 0.0, 1.0
        int_idx = []
        if has_motion:
            lb[nx] = lb[nx + 1] = -cfg.a_max
            ub[nx] = ub[nx + 1] = cfg.a_max
            lb[nx + 2], ub[nx + 2] = 0.0, 1.0
            int_idx.append(2)
        for b in range(n_obs_bins):
            lb[obs_off + b], ub[obs_off + b] = 0.0, 1.0
            int_idx.append(obs_off + b - nx)
        if i == 0:
            lb[:4] = ub[:4] = np.asarray(cfg.x0)
            lb[4] = ub[4] = 0.0
        if i == N:
            lb[4] = ub[4] = 1.0    # the arrival flag must be set by the end

        rows = []
        if i >= 1:
            for k in range(4):
                # arrived => state pinned to the goal (two one-sided rows)
                row = np.zeros(nz)
                row[k] = 1.0
                row[4] = -M
                rows.append((row, goal[k] - M, INF))
                row = np.zeros(nz)
                row[k] = 1.0
                row[4] = M
                rows.append((row, -INF, goal[k] + M))
            for j, (xmin, xmax, ymin, ymax) in enumerate(cfg.obstacles):
                d1, d2, d3, d4 = (obs_off + 4 * j + t for t in range(4))
                row = np.zeros(nz); row[0] = 1.0; row[d1] = M
                rows.append((row, xmin, xmin + M))
                row = np.zeros(nz); row[0] = 1.0; row[d2] = -M
                rows.append((row, xmax - M, xmax))
                row = np.zeros(nz); row[1] = 1.0; row[d4] = -M
                rows.append((row, ymax - M, INF))
                row = np.zeros(nz); row[1] = 1.0; row[d3] = M
                rows.append((row, -INF, ymin + M))
                row = np.zeros(nz); row[0] = 1.0; row[d3] = -M; row[d4] = -M
                rows.append((row, xmin - M, INF))
                row = np.zeros(nz); row[0] = 1.0; row[d3] = M; row[d4] = M
                rows.append((row, -INF, xmax + M))
                row = np.zeros(nz); row[d1] = row[d2] = row[d3] = row[d4] = 1.0
                rows.append((row, 1.0, 1.0))
        nc = len(rows)
        C = np.zeros((nc, nx))
        D = np.zeros((nc, nu))
        cl = np.zeros(nc)
        cu = np.zeros(nc)
        for k, (row, lo, hi) in enumerate(rows):
            C[k] = row[:nx]
            D[k] = row[nx:]
            cl[k], cu[k] = lo, hi

        st = StageData(
            nx=nx, nu=nu, nc=nc, H=H, q=q, r=r, C=C, D=D,
            z_lb=lb, z_ub=ub, c_lb=cl, c_ub=cu,
            int_idx=np.asarray(int_idx, dtype=int),
        )
        if i < N:
            A = np.eye(5)
            A[0, 2] = A[1, 3] = Ts
            B = np.zeros((5, nu))
            B[2, 0] = B[3, 1] = Ts
            B[4, 2] = 1.0
            st.A, st.B, st.a = A, B, np.zeros(5)
        stages.append(st)
    return MiocpProblem(N=N, stages=stages, name=f"motion-N{N}-obs{K}")


def sample_initial_state(cfg: MotionPlanningConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform start position in the workspace square, outside every obstacle."""
    for _ in range(10_000):
        p = rng.uniform(0.0, 10.0, size=2)
        inside = any(
            x1 <= p[0] <= x2 and y1 <= p[1] <= y2 for (x1, x2, y1, y2) in cfg.obstacles
        )
        if not inside:
            return np.array([p[0], p[1], 0.0, 0.0, 0.0])
    raise RuntimeError("could not sample a start outside the obstacles")


# ---------------------------------------------------------------------------
# Cart-pole with soft contact walls
# ---------------------------------------------------------------------------


@dataclass
class CartPoleConfig:
    """Inverted pendulum on a cart between two compliant walls.

    Contact forces follow a stiffness/damping law gated by two indicator
    binaries per wall (penetration sign and force sign).
    """

    N: int = 8
    T_s: float = 0.1
    g: float = 10.0
    l: float = 1.0
    m_c: float = 1.0
    m_p: float = 1.0
    kappa: float = 100.0
    nu: float = 10.0
    d: float = 0.5
    theta_max: float = math.pi / 10
    v_max: float = 1.0
    omega_max: float = 1.0
    f_in_max: float = 1.0
    big_M: float | None = None   # force-scale bound; derived when None
    q_diag: tuple[float, float, float, float] = (1.0, 10.0, 0.1, 0.1)
    r_in: float = 0.5
    terminal_scale: float = 10.0

    def validate(self) -> None:
        for name in ("g", "l", "m_c", "m_p", "kappa", "nu", "d", "T_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.big_M is not None and self.big_M < self.phi_max():
            raise ValueError("big_M too small to represent the contact forces")

    def s_max(self) -> float:
        """Largest |penetration| representable inside the state box."""
        return 2.0 * self.d + self.l * self.theta_max

    def s_pos(self) -> float:
        """Largest achievable penetration (one wall, inside the state box)."""
        return self.l * self.theta_max

    def sdot_max(self) -> float:
        return self.v_max + self.l * self.omega_max

    def phi_max(self) -> float:
        return self.kappa * self.s_max() + self.nu * self.sdot_max()

    def phi_pos(self) -> float:
        """Largest achievable force-law value; also the contact force bound."""
        return self.kappa * self.s_pos() + self.nu * self.sdot_max()

    def force_bound(self) -> float:
        return self.big_M if self.big_M is not None else math.ceil(self.phi_max())

    def dynamics(self, ts: float) -> tuple[np.ndarray, np.ndarray]:
        """Euler map for one step of length ``ts``: inputs (F_in, F_l, F_r)."""
        g, l, mc, mp = self.g, self.l, self.m_c, self.m_p
        A = np.eye(4)
        A[0, 2] = A[1, 3] = ts
        A[2, 1] = ts * g * mp / mc
        A[3, 1] = ts * g * (mc + mp) / (mc * l)
        B = np.zeros((4, 3))
        B[2, 0] = ts / mc
        B[3, 0] = ts / (mc * l)
        B[3, 1] = -ts / (mp * l)
        B[3, 2] = ts / (mp * l)
        return A, B


def _wall_geometry(cfg: CartPoleConfig):
    """Rows of s and s-dot over the state (p, theta, v, omega), plus offsets.

    Penetration is positive: left wall s = -d - (p - l theta), right wall
    s = (p - l theta) - d.
    """
    l = cfg.l
    left = (np.array([-1.0, l, 0.0, 0.0]), -cfg.d, np.array([0.0, 0.0, -1.0, l]))
    right = (np.array([1.0, -l, 0.0, 0.0]), -cfg.d, np.array([0.0, 0.0, 1.0, -l]))
    return left, right


def build_cartpole(cfg: CartPoleConfig) -> MiocpProblem:
    """Assemble the cart-pole MIQP with indicator-gated contact forces.

    Per wall and stage: binary ``a`` flags nonnegative penetration, binary
    ``b`` flags a nonnegative force law value; the force equals the law when
    both hold and is zero otherwise.
    """
    cfg.validate()
    N = cfg.N
    # one-sided interval caps: positive penetration and force-law ranges are
    # much smaller than the negative ones, and tighter caps mean tighter
    # relaxations for the indicator rows
    s_pos = cfg.s_pos()
    s_neg = cfg.s_max()
    phi_pos = cfg.phi_pos()
    phi_neg = cfg.force_bound()
    f_cap = phi_pos
    A4, B3 = cfg.dynamics(cfg.T_s)
    walls = _wall_geometry(cfg)

    stages = []
    for i in range(N + 1):
        nx = 4
        nu = 7 if i < N else 0
        nz = nx + nu
        H = np.zeros((nz, nz))
        scale = cfg.terminal_scale if i == N else 1.0
        for k in range(4):
            H[k, k] = 2.0 * scale * cfg.q_diag[k]
        if i < N:
            H[4, 4] = 2.0 * cfg.r_in
        q = np.zeros(nx)
        r = np.zeros(nu)

        lb = np.concatenate(
            [
                [-cfg.d, -cfg.theta_max, -cfg.v_max, -cfg.omega_max],
                [-cfg.f_in_max, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0][: nu],
            ]
        )
        ub = np.concatenate(
            [
                [cfg.d, cfg.theta_max, cfg.v_max, cfg.omega_max],
                [cfg.f_in_max, f_cap, f_cap, 1.0, 1.0, 1.0, 1.0][: nu],
            ]
        )
        int_idx = np.asarray([3, 4, 5, 6], dtype=int) if i < N else np.zeros(0, dtype=int)

        rows = []
        if i < N:
            # controls: [F_in, F_l, F_r, d_la, d_lb, d_ra, d_rb]
            for w, (s_row, s_off, sd_row) in enumerate(walls):
                fcol = nx + 1 + w
                da = nx + 3 + 2 * w
                db = nx + 4 + 2 * w
                phi_row = np.zeros(nz)
                phi_row[:4] = cfg.kappa * s_row + cfg.nu * sd_row
                phi_off = cfg.kappa * s_off

                row = np.zeros(nz); row[:4] = s_row; row[da] = -s_pos
                rows.append((row, -INF, -s_off))                       # s <= s_pos * a
                row = np.zeros(nz); row[:4] = s_row; row[da] = s_neg
                rows.append((row, -s_neg - s_off, INF))                # s >= -s_neg (1 - a)
                row = phi_row.copy(); row[db] = -phi_pos
                rows.append((row, -INF, -phi_off))                     # phi <= phi_pos * b
                row = phi_row.copy(); row[db] = phi_neg
                rows.append((row, -phi_neg - phi_off, INF))            # phi >= -phi_neg (1 - b)
                row = np.zeros(nz); row[fcol] = 1.0; row[da] = -f_cap
                rows.append((row, -INF, 0.0))                          # F <= f_cap * a
                row = np.zeros(nz); row[fcol] = 1.0; row[db] = -f_cap
                rows.append((row, -INF, 0.0))                          # F <= f_cap * b
                row = -phi_row.copy()
                row[fcol] = 1.0; row[da] += phi_neg; row[db] += phi_neg
                rows.append((row, -INF, 2 * phi_neg + phi_off))        # F <= phi + slack
                row = -phi_row.copy()
                row[fcol] = 1.0; row[da] -= phi_pos; row[db] -= phi_pos
                rows.append((row, phi_off - 2 * phi_pos, INF))         # F >= phi - slack
        nc = len(rows)
        C = np.zeros((nc, nx))
        D = np.zeros((nc, nu))
        cl = np.zeros(nc)
        cu = np.zeros(nc)
        for k, (row, lo, hi) in enumerate(rows):
            C[k] = row[:nx]
            D[k] = row[nx:]
            cl[k], cu[k] = lo, hi

        st = StageData(
            nx=nx, nu=nu, nc=nc, H=H, q=q, r=r, C=C, D=D,
            z_lb=lb, z_ub=ub, c_lb=cl, c_ub=cu, int_idx=int_idx,
        )
        if i < N:
            B = np.zeros((4, nu))
            B[:, :3] = B3
            st.A, st.B, st.a = A4.copy(), B, np.zeros(4)
        stages.append(st)
    return MiocpProblem(N=N, stages=stages, name=f"cartpole-N{N}")


class CartPolePlant:
    """Exact simulation of the linearized cart-pole with the piecewise force law."""

    def __init__(self, cfg: CartPoleConfig, ts: float = 0.05):
        self.cfg = cfg
        self.ts = ts
        self.A, self.B = cfg.dynamics(ts)

    def contact_forces(self, x: np.ndarray) -> tuple[float, float]:
        cfg = self.cfg
        tip = x[0] - cfg.l * x[1]
        out = []
        for s, sdot in (
            (-cfg.d - tip, -x[2] + cfg.l * x[3]),
            (tip - cfg.d, x[2] - cfg.l * x[3]),
        ):
            law = cfg.kappa * s + cfg.nu * sdot
            out.append(law if (s >= 0.0 and law >= 0.0) else 0.0)
        return out[0], out[1]

    def step(self, x: np.ndarray, f_in: float) -> tuple[np.ndarray, float, float]:
        f_l, f_r = self.contact_forces(x)
        x_next = self.A @ x + self.B @ np.array([f_in, f_l, f_r])
        return x_next, f_l, f_r
