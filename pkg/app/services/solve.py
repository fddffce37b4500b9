# app/services/solve.py
"""Branch and bound over conic relaxations, and plan extraction from the incumbent."""
from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.core.config import SolverConfig, settings
from app.core.errors import PlanDecodeError
from app.schemas.plan import DgReference, LoadRow, MotorStart, MotorStep, ObjectiveBreakdown, RestorationPlan
from app.schemas.reports import ExactnessReport
from app.services.backend import RelaxationResult, RelaxationSolver
from app.services.mip import aux_nodes, check_exactness, start_candidates, started_motors
from app.services.motor import SlipStepModel
from app.services.netmodel import Network, Scenario
from app.services.program import ConicProgram, ModelSolution, Sos2Set
from app.services.pwl import bits_msb_first, decode_integer

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["node_id", "parent", "depth", "bound", "status", "decision", "incumbent", "dual_bound"]


@dataclass
class Incumbent:
    x: np.ndarray
    objective: float
    proven: bool = False
    exactness: Optional[ExactnessReport] = None


@dataclass
class SearchStats:
    status: str = "OPTIMAL"  # OPTIMAL | INFEASIBLE | NODE_LIMIT | TIME_LIMIT | NUMERICAL | UNBOUNDED
    nodes: int = 0
    best_bound: float = -math.inf
    gap: float = math.inf
    elapsed_s: float = 0.0
    numerical_nodes: int = 0
    certificates: List[str] = field(default_factory=list)
    log: List[dict] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=LOG_COLUMNS)


@dataclass
class _Node:
    id: int
    parent: Optional[int]
    depth: int
    bound: float
    lo: np.ndarray
    hi: np.ndarray
    decision: str = "root"


def _gap(incumbent: float, bound: float) -> float:
    if not math.isfinite(incumbent):
        return math.inf
    return max(0.0, incumbent - bound) / max(1.0, abs(incumbent))


# ----------------------- #
# Branching
# ----------------------- #
def _most_fractional(x: np.ndarray, binaries: np.ndarray, tol: float) -> Optional[int]:
    if not len(binaries):
        return None
    vals = x[binaries]
    frac = np.minimum(vals - np.floor(vals), np.ceil(vals) - vals)
    j = int(np.argmax(frac))  # first maximum -> lowest id
    return int(binaries[j]) if frac[j] > tol else None


def _sos2_split(s: Sos2Set, x: np.ndarray, hi: np.ndarray, tol: float) -> int:
    nz = s.support(x, tol)
    allowed = [i for i, v in enumerate(s.lambdas) if hi[v] > 0]
    mid = 0.5 * (allowed[0] + allowed[-1])
    candidates = range(int(nz[0]) + 1, int(nz[-1]))
    return min(candidates, key=lambda r: (abs(r - mid), r))


def _fix_window(s: Sos2Set, hi: np.ndarray, j: int) -> None:
    for i, v in enumerate(s.lambdas):
        if i != j and i != j + 1:
            hi[v] = 0.0


class BranchAndBound:
    def __init__(self, program: ConicProgram, config: Optional[SolverConfig] = None):
        self.program = program
        self.config = config or settings.solver
        self.binaries = program.binaries
        self.solver = RelaxationSolver(program, self.config)
        self.stats = SearchStats(certificates=list(program.certificates))
        self.incumbent: Optional[Incumbent] = None
        self._heap: List[Tuple[float, int, _Node]] = []
        self._next_id = 0

    # ----------------------- #
    # Helpers
    # ----------------------- #
    def _cutoff(self) -> float:
        if self.incumbent is None:
            return math.inf
        inc = self.incumbent.objective
        return inc - max(self.config.abs_gap, self.config.rel_gap * abs(inc))

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def _dual_bound(self, extra: float) -> float:
        open_min = min([extra] + ([self._heap[0][0]] if self._heap else []))
        inc = self.incumbent.objective if self.incumbent else math.inf
        return min(open_min, inc)

    def _log(self, node: _Node, bound: float, status: str) -> None:
        self.stats.log.append({
            "node_id": node.id,
            "parent": node.parent,
            "depth": node.depth,
            "bound": bound,
            "status": status,
            "decision": node.decision,
            "incumbent": self.incumbent.objective if self.incumbent else None,
            "dual_bound": self._dual_bound(bound),
        })

    def _integral(self, x: np.ndarray) -> bool:
        return _most_fractional(x, self.binaries, self.config.int_tol) is None

    def _violated_sos2(self, x: np.ndarray) -> List[Sos2Set]:
        bad = [s for s in self.program.sos2 if not s.satisfied(x, self.config.int_tol)]
        return sorted(bad, key=lambda s: (s.stage, s.id))

    def _fixed_bounds(self, lo: np.ndarray, hi: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = lo.copy(), hi.copy()
        r = np.round(x[self.binaries])
        lo[self.binaries] = r
        hi[self.binaries] = r
        for s in self.program.sos2:
            _fix_window(s, hi, s.bracket(s.x_value(x)))
        return lo, hi

    def _offer(self, node: _Node, res: RelaxationResult) -> bool:
        """Polish a feasible point and keep it if it improves the incumbent."""
        lo, hi = self._fixed_bounds(node.lo, node.hi, res.x)
        polished = self.solver.solve(lo, hi, polish=True)
        if polished.ok and polished.objective <= res.objective + max(self.config.abs_gap, 1e-6 * abs(res.objective)):
            res = polished
        if self.incumbent is not None and res.objective >= self.incumbent.objective:
            return False
        self.incumbent = Incumbent(res.x, res.objective)
        logger.info("node %d: new incumbent %.8g", node.id, res.objective)
        return True

    def _repair(self, node: _Node, res: RelaxationResult) -> Optional[RelaxationResult]:
        """Fix SOS2 windows stage by stage around the current arguments and re-solve."""
        lo, hi = node.lo.copy(), node.hi.copy()
        x = res.x
        for stage in sorted({s.stage for s in self.program.sos2}):
            for s in self.program.sos2:
                if s.stage == stage:
                    _fix_window(s, hi, s.bracket(s.x_value(x)))
            res = self.solver.solve(lo, hi)
            self.stats.nodes += 1
            step = _Node(self._new_id(), node.id, node.depth + 1, node.bound, lo, hi, f"repair stage {stage}")
            self._log(step, res.objective if res.ok else node.bound, "repair" if res.ok else res.status)
            if not res.ok:
                return None
            x = res.x
        if self._integral(x) and not self._violated_sos2(x):
            return res
        return None

    def _push(self, node: _Node) -> None:
        heapq.heappush(self._heap, (node.bound, node.id, node))

    def _children(self, node: _Node, bound: float, x: np.ndarray) -> Tuple[_Node, _Node]:
        """(preferred, other) children of a fractional node."""
        j = _most_fractional(x, self.binaries, self.config.int_tol)
        if j is not None:
            down_hi = node.hi.copy()
            down_hi[j] = 0.0
            up_lo = node.lo.copy()
            up_lo[j] = 1.0
            name = self.program.names[j]
            down = _Node(self._new_id(), node.id, node.depth + 1, bound, node.lo, down_hi, f"{name}<=0")
            up = _Node(self._new_id(), node.id, node.depth + 1, bound, up_lo, node.hi, f"{name}>=1")
            return (up, down) if x[j] >= 0.5 else (down, up)

        s = self._violated_sos2(x)[0]
        r = _sos2_split(s, x, node.hi, self.config.int_tol)
        left_hi, right_hi = node.hi.copy(), node.hi.copy()
        for i, v in enumerate(s.lambdas):
            if i > r:
                left_hi[v] = 0.0
            if i < r:
                right_hi[v] = 0.0
        left = _Node(self._new_id(), node.id, node.depth + 1, bound, node.lo, left_hi, f"sos2[{s.id}]<={r}")
        right = _Node(self._new_id(), node.id, node.depth + 1, bound, node.lo, right_hi, f"sos2[{s.id}]>={r}")
        weights = x[list(s.lambdas)]
        return (left, right) if weights[: r + 1].sum() >= weights[r:].sum() else (right, left)

    # ----------------------- #
    # Search
    # ----------------------- #
    def run(self) -> Tuple[Optional[Incumbent], SearchStats]:
        cfg = self.config
        t0 = time.monotonic()
        if self.program.certificates:
            self.stats.status = "INFEASIBLE"
            for msg in self.program.certificates:
                logger.warning("infeasible before search: %s", msg)
            return None, self.stats

        root = _Node(self._new_id(), None, 0, -math.inf, self.solver.lo0.copy(), self.solver.hi0.copy())
        diving = True
        dive_next: Optional[_Node] = root
        limit = None

        while dive_next is not None or self._heap:
            if dive_next is not None:
                node, dive_next = dive_next, None
            else:
                node = heapq.heappop(self._heap)[2]
            if node.bound >= self._cutoff():
                self._log(node, node.bound, "skipped")
                continue
            if self.stats.nodes >= cfg.node_limit:
                limit = "NODE_LIMIT"
            elif cfg.time_limit_s is not None and time.monotonic() - t0 > cfg.time_limit_s:
                limit = "TIME_LIMIT"
            if limit:
                self._push(node)
                break

            res = self.solver.solve(node.lo, node.hi)
            self.stats.nodes += 1
            if self.stats.nodes % 50 == 0:
                logger.info("%d nodes, %d open, incumbent %s", self.stats.nodes, len(self._heap),
                            f"{self.incumbent.objective:.8g}" if self.incumbent else "none")
            if not res.ok:
                if res.status == "NUMERICAL":
                    self.stats.numerical_nodes += 1
                if res.status == "UNBOUNDED" and node.parent is None:
                    self.stats.status = "UNBOUNDED"
                    self._log(node, -math.inf, res.status)
                    self.stats.elapsed_s = time.monotonic() - t0
                    return None, self.stats
                logger.debug("node %d: %s", node.id, res.status)
                self._log(node, node.bound, res.status)
                diving = diving and self.incumbent is None
                continue

            bound = max(res.objective, node.bound)
            logger.debug("node %d depth %d: bound %.8g", node.id, node.depth, bound)
            if bound >= self._cutoff():
                self._log(node, bound, "pruned")
                diving = diving and self.incumbent is None
                continue

            x = res.x
            if self._integral(x):
                violated = self._violated_sos2(x)
                if not violated:
                    improved = self._offer(node, res)
                    self._log(node, bound, "integral")
                    diving = improved
                    continue
                if cfg.repair:
                    repaired = self._repair(node, res)
                    if repaired is not None:
                        improved = self._offer(node, repaired)
                        tol = max(cfg.abs_gap, cfg.rel_gap * abs(repaired.objective))
                        if repaired.objective <= bound + tol:
                            self._log(node, bound, "repaired")
                            diving = improved
                            continue
                        if improved:
                            diving = True

            preferred, other = self._children(node, bound, x)
            self._log(node, bound, "branched")
            if diving:
                dive_next = preferred
                self._push(other)
            else:
                self._push(preferred)
                self._push(other)

        self.stats.elapsed_s = time.monotonic() - t0
        open_bounds = [b for b, _, _ in self._heap]
        if self.incumbent is None:
            self.stats.status = limit or ("NUMERICAL" if self.stats.numerical_nodes else "INFEASIBLE")
            self.stats.best_bound = min(open_bounds, default=math.inf)
            return None, self.stats

        inc = self.incumbent.objective
        self.stats.best_bound = min(open_bounds + [inc]) if limit else inc
        self.stats.gap = _gap(inc, self.stats.best_bound)
        if limit:
            self.stats.status = limit
        elif self.stats.numerical_nodes:
            self.stats.status = "NUMERICAL"
            logger.warning("%d relaxations failed numerically; optimality not proven", self.stats.numerical_nodes)
        self.incumbent.proven = self.stats.status == "OPTIMAL"
        if not self.incumbent.proven:
            logger.warning("search stopped with %s; incumbent %.8g, gap %.3g", self.stats.status, inc, self.stats.gap)
        return self.incumbent, self.stats


def branch_and_bound(program: ConicProgram, config: Optional[SolverConfig] = None) -> Tuple[Optional[Incumbent], SearchStats]:
    return BranchAndBound(program, config).run()


# ----------------------- #
# Plan extraction
# ----------------------- #
def _binary(value: float, what: str, tol: float = 1e-4) -> int:
    r = round(value)
    if abs(value - r) > tol or r not in (0, 1):
        raise PlanDecodeError(f"{what} = {value:.6g} is not binary")
    return int(r)


def extract_plan(incumbent: Incumbent, program: ConicProgram, net: Network, scenario: Scenario,
                 slip_models: Dict[int, SlipStepModel], stats: Optional[SearchStats] = None) -> RestorationPlan:
    sol = ModelSolution.of(program, incumbent.x, incumbent.objective)
    n = scenario.n_steps

    loads: List[LoadRow] = []
    for bus in net.load_buses:
        static, motor = net.static_load_at(bus), net.motor_at(bus)
        kind = "mixed" if static and motor else ("motor" if motor else "static")
        l0 = [scenario.l0_at(bus, t) for t in range(n)]
        l = [_binary(sol[("L", bus, t)], f"L[{bus},{t}]") for t in range(n)]
        loads.append(LoadRow(bus=bus, kind=kind, l0=l0, l=l,
                             shifted_steps=[t for t in range(n) if l0[t] and not l[t]]))

    motors: List[MotorStart] = []
    for spec in started_motors(net, scenario):
        m = spec.bus
        model = slip_models[m]
        row = next(r for r in loads if r.bus == m)
        start = next((t for t in start_candidates(scenario, m) if row.l[t]), None)
        tap = bits = None
        at = net.autotransformer_at(m)
        if at is not None and sol.get(("dr", m)) is not None:
            lo, _ = at.tap_range
            vals = []
            j = 0
            while sol.get(("bit", "tap", m, j)) is not None:
                vals.append(sol[("bit", "tap", m, j)])
                j += 1
            bits = bits_msb_first(vals) if vals else ""
            tap = decode_integer(bits, lo)
            if abs(tap - sol[("dr", m)]) > 1e-4:
                raise PlanDecodeError(f"tap bits {bits} decode to {tap}, model holds {sol[('dr', m)]:.6g}")
        steps: List[MotorStep] = []
        for k in range(1, model.k_max + 1):
            if sol.get(("t", k, m)) is None:
                raise PlanDecodeError(f"motor at {m} has no time variable for step {k}")
            node = aux_nodes(m)[2] if sol.get(("U", aux_nodes(m)[2], k, m)) is not None else m
            steps.append(MotorStep(
                k=k,
                slip=float(model.slips[k - 1]),
                u_motor=sol[("U", node, k, m)],
                t_ele_pu=sol[("Tele", k, m)],
                dt_s=sol[("dt", k, m)],
                t_s=sol[("t", k, m)],
            ))
        bus_u = {str(b): [sol[("U", b, k, m)] for k in range(1, model.k_max + 1)] for b in net.order}
        motors.append(MotorStart(
            bus=m,
            start_step=start,
            start_label=scenario.labels[start] if start is not None else None,
            tap=tap,
            tap_bits=bits,
            predicted_time_s=steps[-1].t_s if steps else 0.0,
            steps=steps,
            bus_u=bus_u,
        ))

    i_base = net.spec.base.i_base
    refs: List[DgReference] = []
    for d in net.dgs:
        if not d.frt:
            continue
        for spec in started_motors(net, scenario):
            m = spec.bus
            if sol.get(("Fp", d.bus, m)) is None:
                continue
            fp, fq = sol[("Fp", d.bus, m)], sol[("Fq", d.bus, m)]
            p_sum = sum(sol[("PDG", d.bus, k, m)] for k in range(1, slip_models[m].k_max + 1))
            q_sum = sum(sol[("QDG", d.bus, k, m)] for k in range(1, slip_models[m].k_max + 1))
            ip = math.copysign(math.sqrt(max(fp, 0.0)), p_sum)
            iq = math.copysign(math.sqrt(max(fq, 0.0)), q_sum)
            refs.append(DgReference(
                bus=d.bus, motor_bus=m, fp_pu2=fp, fq_pu2=fq, ip_pu=ip, iq_pu=iq,
                fp_a2=fp * i_base ** 2, fq_a2=fq * i_base ** 2, ip_a=ip * i_base, iq_a=iq * i_base,
            ))

    # objective from decoded values
    x = incumbent.x.copy()
    x[program.binaries] = np.round(x[program.binaries])
    reliability = program.parts["reliability"].value(x) if "reliability" in program.parts else 0.0
    operational = program.parts["operational"].value(x) if "operational" in program.parts else 0.0
    w_re, w_op = scenario.w_re, scenario.w_op
    total = w_re * reliability + w_op * operational
    if abs(total - incumbent.objective) > 1e-6 * max(1.0, abs(incumbent.objective)):
        raise PlanDecodeError(f"decoded objective {total:.10g} differs from incumbent {incumbent.objective:.10g}")

    report = incumbent.exactness or check_exactness(net, sol)
    incumbent.exactness = report
    return RestorationPlan(
        network=net.spec.name,
        scenario=scenario.spec.name,
        step_minutes=scenario.step_minutes,
        labels=list(scenario.labels),
        loads=loads,
        motors=motors,
        dg_references=refs,
        objective=ObjectiveBreakdown(total=total, reliability=reliability, operational=operational, w_re=w_re, w_op=w_op),
        proven_optimal=incumbent.proven,
        gap=stats.gap if stats is not None and math.isfinite(stats.gap) else 0.0,
        nodes=stats.nodes if stats is not None else 0,
        exactness=report.verdict,
    )
