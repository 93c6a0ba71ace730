"""Shared generators and oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import linprog

from blockmiqp.model import INF, MiocpProblem, StageData


def random_problem(
    rng: np.random.Generator,
    N: int | None = None,
    nx_rng=(1, 3),
    nu_rng=(1, 3),
    nc_rng=(0, 2),
    n_int: int = 0,
    strictly_convex: bool = False,
    feasible_seed: bool = True,
    allow_infinite: bool = True,
    int_lo_hi=(0, 1),
) -> MiocpProblem:
    """Random OCP-structured MIQP, built around a seed trajectory.

    With ``feasible_seed`` the bounds and rows are placed around a concrete
    dynamics-consistent trajectory whose integer entries are integral, so the
    instance is guaranteed feasible; otherwise boxes and rows are placed
    blindly and the instance may well be infeasible.
    """
    if N is None:
        N = int(rng.integers(1, 5))
    nxs = [int(rng.integers(*nx_rng) if i else rng.integers(*nx_rng)) for i in range(N + 1)]
    nus = [int(rng.integers(*nu_rng)) for _ in range(N + 1)]

    # dynamics + seed trajectory
    As, Bs, a_s = [], [], []
    xs = [rng.uniform(-1, 1, size=nxs[0])]
    us = [rng.uniform(-1, 1, size=nus[i]) for i in range(N + 1)]
    for i in range(N):
        A = rng.uniform(-0.8, 0.8, size=(nxs[i + 1], nxs[i])) / max(1.0, np.sqrt(nxs[i]))
        B = rng.uniform(-1, 1, size=(nxs[i + 1], nus[i]))
        a = rng.uniform(-0.3, 0.3, size=nxs[i + 1])
        As.append(A)
        Bs.append(B)
        a_s.append(a)

    # integer coordinates (controls only)
    all_controls = [(i, j) for i in range(N + 1) for j in range(nus[i])]
    rng.shuffle(all_controls)
    int_coords = sorted(all_controls[: min(n_int, len(all_controls))])
    int_per_stage = {i: sorted(j for (s, j) in int_coords if s == i) for i in range(N + 1)}
    lo_int, hi_int = int_lo_hi
    for (i, j) in int_coords:
        us[i][j] = float(rng.integers(lo_int, hi_int + 1))
    for i in range(N):
        xs.append(As[i] @ xs[i] + Bs[i] @ us[i] + a_s[i])

    stages = []
    for i in range(N + 1):
        nz = nxs[i] + nus[i]
        z0 = np.concatenate([xs[i], us[i]])
        ints_z = np.asarray(int_per_stage[i], dtype=int) + nxs[i]

        # Hessian support: strictly convex, or a random quadratic sub-block
        if strictly_convex:
            M = rng.normal(size=(nz, nz))
            H = M @ M.T / nz + 0.3 * np.eye(nz)
        else:
            support = rng.random(nz) < 0.75
            H = np.zeros((nz, nz))
            idx = np.flatnonzero(support)
            if idx.size:
                M = rng.normal(size=(idx.size, idx.size))
                H[np.ix_(idx, idx)] = M @ M.T / idx.size + 0.2 * np.eye(idx.size)

        if feasible_seed:
            lo = z0 - rng.uniform(0.3, 1.5, size=nz)
            hi = z0 + rng.uniform(0.3, 1.5, size=nz)
        else:
            lo = rng.uniform(-1.5, 0.5, size=nz)
            hi = lo + rng.uniform(0.05, 1.5, size=nz)
        for j in ints_z:
            lo[j] = float(lo_int)
            hi[j] = float(hi_int)
            if not feasible_seed:
                pass
        if allow_infinite:
            support_mask = np.abs(H).max(axis=1) > 0 if H.size else np.zeros(nz, dtype=bool)
            for j in range(nz):
                if j in ints_z or not support_mask[j]:
                    continue
                roll = rng.random()
                if roll < 0.08:
                    lo[j] = -INF
                elif roll < 0.16:
                    hi[j] = INF

        nc = int(rng.integers(*nc_rng))
        C = np.zeros((nc, nxs[i]))
        D = np.zeros((nc, nus[i]))
        cl = np.zeros(nc)
        cu = np.zeros(nc)
        for k in range(nc):
            picks = rng.choice(nz, size=min(nz, int(rng.integers(1, 4))), replace=False)
            row = np.zeros(nz)
            row[picks] = rng.uniform(-2, 2, size=picks.size)
            if ints_z.size and rng.random() < 0.3:
                row[rng.choice(ints_z)] = rng.uniform(5, 20) * rng.choice([-1.0, 1.0])
            act = float(row @ z0) if feasible_seed else float(rng.uniform(-1, 1))
            side = rng.random()
            if side < 0.4:
                cl[k], cu[k] = act - rng.uniform(0.2, 2.0), INF
            elif side < 0.8:
                cl[k], cu[k] = -INF, act + rng.uniform(0.2, 2.0)
            else:
                cl[k] = act - rng.uniform(0.2, 2.0)
                cu[k] = act + rng.uniform(0.2, 2.0)
            C[k] = row[: nxs[i]]
            D[k] = row[nxs[i] :]

        stages.append(
            StageData(
                nx=nxs[i],
                nu=nus[i],
                nc=nc,
                H=H,
                q=rng.uniform(-1, 1, size=nxs[i]),
                r=rng.uniform(-1, 1, size=nus[i]),
                C=C,
                D=D,
                z_lb=lo,
                z_ub=hi,
                c_lb=cl,
                c_ub=cu,
                int_idx=np.asarray(int_per_stage[i], dtype=int),
                A=As[i] if i < N else None,
                B=Bs[i] if i < N else None,
                a=a_s[i] if i < N else None,
            )
        )
    return MiocpProblem(N=N, stages=stages, name="random")


def lp_feasible(problem: MiocpProblem, fixed: dict[tuple[int, int], float] | None = None, tol: float = 1e-7) -> bool:
    """LP feasibility of the continuous relaxation, via HiGHS."""
    fixed = fixed or {}
    offsets = []
    total = 0
    for st in problem.stages:
        offsets.append(total)
        total += st.nz
    bounds = []
    for i, st in enumerate(problem.stages):
        for j in range(st.nz):
            if (i, j) in fixed:
                v = fixed[(i, j)]
                bounds.append((v, v))
            else:
                lo = st.z_lb[j] if np.isfinite(st.z_lb[j]) else None
                hi = st.z_ub[j] if np.isfinite(st.z_ub[j]) else None
                bounds.append((lo, hi))
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    for i, st in enumerate(problem.stages):
        off = offsets[i]
        for k in range(st.nc):
            row = np.zeros(total)
            row[off : off + st.nz] = st.E[k]
            if np.isfinite(st.c_ub[k]):
                A_ub.append(row)
                b_ub.append(st.c_ub[k] + tol)
            if np.isfinite(st.c_lb[k]):
                A_ub.append(-row)
                b_ub.append(-st.c_lb[k] + tol)
        if i < problem.N:
            noff = offsets[i + 1]
            for kk in range(st.A.shape[0]):
                row = np.zeros(total)
                row[off : off + st.nz] = st.F[kk]
                row[noff + kk] = -1.0
                A_eq.append(row)
                b_eq.append(-st.a[kk])
    res = linprog(
        c=np.zeros(total),
        A_ub=np.asarray(A_ub) if A_ub else None,
        b_ub=np.asarray(b_ub) if b_ub else None,
        A_eq=np.asarray(A_eq) if A_eq else None,
        b_eq=np.asarray(b_eq) if b_eq else None,
        bounds=bounds,
        method="highs",
    )
    return bool(res.status == 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
