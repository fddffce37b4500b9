# app/services/backend.py
"""Continuous relaxations of a ConicProgram solved with cvxpy (Clarabel by default)."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Optional

import cvxpy as cp
import numpy as np

from app.core.config import SolverConfig, settings
from app.services.program import ConicProgram

logger = logging.getLogger(__name__)

Status = Literal["OPTIMAL", "INFEASIBLE", "UNBOUNDED", "NUMERICAL"]

_STATUS = {
    cp.OPTIMAL: ("OPTIMAL", False),
    cp.OPTIMAL_INACCURATE: ("OPTIMAL", True),
    cp.INFEASIBLE: ("INFEASIBLE", False),
    cp.INFEASIBLE_INACCURATE: ("INFEASIBLE", True),
    cp.UNBOUNDED: ("UNBOUNDED", False),
    cp.UNBOUNDED_INACCURATE: ("UNBOUNDED", True),
}


@dataclass
class RelaxationResult:
    status: Status
    objective: float  # +inf unless OPTIMAL
    x: Optional[np.ndarray] = None
    inaccurate: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "OPTIMAL"


class RelaxationSolver:
    """One cvxpy problem per program; node bounds enter as parameters so re-solves skip recompilation."""

    def __init__(self, program: ConicProgram, config: Optional[SolverConfig] = None):
        self.config = config or settings.solver
        self.program = program
        arr = program.to_arrays()
        self.c = arr.c
        self.c0 = arr.c0
        self.lo0 = arr.lo
        self.hi0 = arr.hi
        self.n = program.n_vars
        self.problem: Optional[cp.Problem] = None
        if self.n == 0:
            return

        self.x = cp.Variable(self.n)
        self.lo_idx = np.flatnonzero(np.isfinite(arr.lo))
        self.hi_idx = np.flatnonzero(np.isfinite(arr.hi))
        self.lo_par = cp.Parameter(len(self.lo_idx)) if len(self.lo_idx) else None
        self.hi_par = cp.Parameter(len(self.hi_idx)) if len(self.hi_idx) else None
        self.scale = cp.Parameter(nonneg=True, value=1.0)

        cons = []
        if arr.a_eq.shape[0]:
            cons.append(arr.a_eq @ self.x == arr.b_eq)
        if arr.a_ub.shape[0]:
            cons.append(arr.a_ub @ self.x <= arr.b_ub)
        if len(self.lo_idx):
            cons.append(self.x[self.lo_idx] >= self.lo_par)
        if len(self.hi_idx):
            cons.append(self.x[self.hi_idx] <= self.hi_par)
        for _, (t_mat, t0, parts) in arr.cones.items():
            t = t_mat @ self.x + t0
            xs = cp.vstack([m @ self.x + x0 for m, x0 in parts])
            cons.append(cp.SOC(t, xs, axis=0))
        self.problem = cp.Problem(cp.Minimize(self.scale * (self.c @ self.x)), cons)

    def _options(self, polish: bool) -> dict:
        tol = self.config.cone_tol * (1e-2 if polish else 1.0)
        if self.config.backend.upper() == "CLARABEL":
            return {"tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol}
        return {}

    def solve(self, lo: Optional[np.ndarray] = None, hi: Optional[np.ndarray] = None,
              polish: bool = False) -> RelaxationResult:
        lo = self.lo0 if lo is None else lo
        hi = self.hi0 if hi is None else hi
        if self.n == 0:
            return RelaxationResult("OPTIMAL", self.c0, np.zeros(0))
        if np.any(lo > hi + 1e-12):
            return RelaxationResult("INFEASIBLE", np.inf)
        if not (np.all(np.isfinite(lo[self.lo_idx])) and np.all(np.isfinite(hi[self.hi_idx]))):
            raise ValueError("node bounds may only tighten finite bounds of the program")

        if self.lo_par is not None:
            self.lo_par.value = lo[self.lo_idx]
        if self.hi_par is not None:
            self.hi_par.value = hi[self.hi_idx]
        self.scale.value = 1.0
        if polish:
            # unit-size prices on the free variables so small loss prices still pin the cones
            free = lo < hi
            big = np.max(np.abs(self.c[free]), initial=0.0)
            self.scale.value = 1.0 / big if big > 0 else 1.0
        try:
            self.problem.solve(solver=self.config.backend, **self._options(polish))
        except cp.error.SolverError as exc:
            logger.debug("relaxation solve failed: %s", exc)
            return RelaxationResult("NUMERICAL", np.inf)

        status, inaccurate = _STATUS.get(self.problem.status, ("NUMERICAL", True))
        if status != "OPTIMAL" or self.x.value is None:
            return RelaxationResult(status if status != "OPTIMAL" else "NUMERICAL", np.inf, None, inaccurate)
        x = np.clip(np.asarray(self.x.value, dtype=float), lo, hi)
        return RelaxationResult("OPTIMAL", float(self.c @ x + self.c0), x, inaccurate)


def solve_conic(program: ConicProgram, config: Optional[SolverConfig] = None,
                lo: Optional[np.ndarray] = None, hi: Optional[np.ndarray] = None) -> RelaxationResult:
    """Solve the program with integrality and SOS2 adjacency dropped."""
    return RelaxationSolver(program, config).solve(lo, hi)
