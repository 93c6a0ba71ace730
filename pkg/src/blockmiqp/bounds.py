"""Mutable per-stage bound state that presolve operations tighten."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .model import MiocpProblem

#: absolute tightening below which a bound move does not count as progress
TIGHTEN_EVENT_TOL = 1e-6


@dataclass
class BoundState:
    """Variable and row bounds of one subproblem, plus strengthened D matrices.

    Single-owner mutable value: branch-and-bound nodes and probing work on
    clones. ``z_lb/z_ub`` are indexed in stage z-coordinates (states first,
    then controls); ``c_lb/c_ub`` follow the stage inequality rows.
    """

    z_lb: list[np.ndarray]
    z_ub: list[np.ndarray]
    c_lb: list[np.ndarray]
    c_ub: list[np.ndarray]
    D: list[np.ndarray]
    int_mask: list[np.ndarray]
    infeasible: bool = False
    infeasible_info: tuple[int, int, str] | None = None
    tighten_events: int = 0
    coefficients_strengthened: int = 0
    rows_removed: int = 0

    @classmethod
    def from_problem(cls, problem: "MiocpProblem") -> "BoundState":
        z_lb, z_ub, c_lb, c_ub, D, masks = [], [], [], [], [], []
        for st in problem.stages:
            z_lb.append(st.z_lb.astype(float).copy())
            z_ub.append(st.z_ub.astype(float).copy())
            c_lb.append(st.c_lb.astype(float).copy())
            c_ub.append(st.c_ub.astype(float).copy())
            D.append(st.D.astype(float).copy())
            mask = np.zeros(st.nz, dtype=bool)
            mask[st.int_z_idx()] = True
            masks.append(mask)
        return cls(z_lb, z_ub, c_lb, c_ub, D, masks)

    def clone(self) -> "BoundState":
        return BoundState(
            [v.copy() for v in self.z_lb],
            [v.copy() for v in self.z_ub],
            [v.copy() for v in self.c_lb],
            [v.copy() for v in self.c_ub],
            [m.copy() for m in self.D],
            [m.copy() for m in self.int_mask],
            self.infeasible,
            self.infeasible_info,
            self.tighten_events,
            self.coefficients_strengthened,
            self.rows_removed,
        )

    @property
    def num_stages(self) -> int:
        return len(self.z_lb)

    def mark_infeasible(self, stage: int, index: int, kind: str) -> None:
        if not self.infeasible:
            self.infeasible = True
            self.infeasible_info = (stage, index, kind)

    def is_fixed(self, stage: int, j: int) -> bool:
        return self.z_ub[stage][j] - self.z_lb[stage][j] <= 0.0

    def fixed_count(self) -> int:
        return int(sum(np.count_nonzero(ub <= lb) for lb, ub in zip(self.z_lb, self.z_ub)))

    def fix(self, stage: int, j: int, value: float) -> None:
        self.z_lb[stage][j] = value
        self.z_ub[stage][j] = value

    def intersect_z(self, stage: int, new_lb: np.ndarray, new_ub: np.ndarray, eps: float) -> bool:
        """Intersect candidate bounds into the stage, monotonically.

        Counts tightening events, snaps sub-``eps`` crossings to a point, and
        marks the state infeasible on a crossing beyond ``eps``. Returns True
        while the state stays feasible.
        """
        lb, ub = self.z_lb[stage], self.z_ub[stage]
        nlb = np.maximum(lb, new_lb)
        nub = np.minimum(ub, new_ub)
        gap = nub - nlb
        crossed = gap < -eps
        if np.any(crossed):
            idx = int(np.argmax(crossed))
            self.mark_infeasible(stage, idx, "variable")
            return False
        snap = (gap < 0.0) & ~crossed
        if np.any(snap):
            mid = 0.5 * (nlb[snap] + nub[snap])
            intm = self.int_mask[stage][snap]
            mid = np.where(intm, np.round(mid), mid)
            nlb[snap] = mid
            nub[snap] = mid
        with np.errstate(invalid="ignore"):
            diff_lo = nlb - lb
            diff_hi = ub - nub
        diff_lo[np.isnan(diff_lo)] = 0.0
        diff_hi[np.isnan(diff_hi)] = 0.0
        self.tighten_events += int(np.count_nonzero(diff_lo >= TIGHTEN_EVENT_TOL))
        self.tighten_events += int(np.count_nonzero(diff_hi >= TIGHTEN_EVENT_TOL))
        self.z_lb[stage][:] = nlb
        self.z_ub[stage][:] = nub
        return True

    def progress_snapshot(self) -> tuple[int, int]:
        return self.fixed_count(), self.tighten_events
