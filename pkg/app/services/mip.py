# app/services/mip.py
"""Restoration MISOCP: sequencing, load models, branch flow, DG saturation, autotransformer taps and transient limits."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from app.core.config import ModelConfig, settings
from app.core.errors import ModelBuildError
from app.schemas.network import AutotransformerSpec, MotorSpec
from app.schemas.reports import ConditionCheck, ExactnessReport
from app.services.motor import SlipStepModel, build_slip_model, running_load
from app.services.netmodel import Network, ProtectionCurve, Scenario
from app.services.program import ConicProgram, LinExpr, ModelSolution, Var, VariableMap, lin_sum
from app.services.pwl import Breakpoints, encode_integer_as_binaries, encode_product_bin_cont, encode_pwl, reciprocal

logger = logging.getLogger(__name__)

Node = Union[int, str]

# formulation reference of every constraint family, reported in model statistics
EQUATION_TAGS: Dict[str, str] = {
    "electrical_torque": "1",
    "step_rate": "2",
    "elapsed_time": "3",
    "sequencing": "7",
    "monotone": "7",
    "one_motor_start": "7",
    "nominal_load": "8a/8b",
    "static_load": "8c/8d",
    "motor_load": "8e-8h",
    "voltage_drop": "9a",
    "p_balance": "9b",
    "q_balance": "9c",
    "line_cone": "9d",
    "dg_current_limit": "10a",
    "dg_p_cone": "10b",
    "dg_q_cone": "10c",
    "tap_range": "11b",
    "tap_ratio": "11b",
    "torque_margin": "12a",
    "undervoltage": "12b",
    "overcurrent": "12c",
    "protection_pwl": "12b/12c",
    "pwl": "13-15",
    "sos2:pwl": "16",
    "sos2:protection_pwl": "16",
    "load_voltage_product": "17-18",
    "start_snapshot_product": "17-18",
    "tap_product": "17-18",
}


# ----------------------- #
# Start blocks
# ----------------------- #
@dataclass(frozen=True)
class BlockEdge:
    i: Node
    j: Node
    kind: Literal["line", "ratio"]
    r: float = 0.0
    x: float = 0.0
    f_th: Optional[float] = None  # squared ampacity


@dataclass(frozen=True, eq=False)
class StartBlock:
    """Network snapshot for slip step k of one motor start."""

    motor: MotorSpec
    k: int  # 1-based
    slip: float
    nodes: Tuple[Node, ...]
    edges: Tuple[BlockEdge, ...]
    motor_node: Node
    autotransformer: Optional[AutotransformerSpec]  # None once bypassed

    @property
    def m(self) -> int:
        return self.motor.bus

    def incoming(self, n: Node) -> List[BlockEdge]:
        return [e for e in self.edges if e.j == n]

    def outgoing(self, n: Node) -> List[BlockEdge]:
        return [e for e in self.edges if e.i == n]


def aux_nodes(bus: int) -> Tuple[str, str, str]:
    return f"{bus}:p", f"{bus}:s", f"{bus}:m"


def started_motors(net: Network, scenario: Scenario) -> List[MotorSpec]:
    """Motors in the off-outage area that the stage-1 plan energizes at some step."""
    return [m for m in net.motors if any(scenario.l0.get(m.bus, ()))]


def start_candidates(scenario: Scenario, bus: int) -> Tuple[int, ...]:
    return tuple(t for t, on in enumerate(scenario.l0.get(bus, ())) if on)


def block_topology(net: Network, motor: MotorSpec, k: int, slip: float) -> StartBlock:
    edges = [
        BlockEdge(ln.from_bus, ln.to_bus, "line", ln.r_pu, ln.x_pu,
                  None if ln.ampacity_pu is None else ln.ampacity_pu ** 2)
        for ln in net.lines
    ]
    nodes: List[Node] = list(net.order)
    motor_node: Node = motor.bus
    at = net.autotransformer_at(motor.bus)
    # bypassed once the step starts at or above the bypass speed
    if at is not None and slip > 1.0 - at.bypass_speed + 1e-9:
        p, s, mm = aux_nodes(motor.bus)
        nodes += [p, s, mm]
        edges += [
            BlockEdge(motor.bus, p, "line", at.zp.r, at.zp.x),
            BlockEdge(p, s, "ratio"),
            BlockEdge(s, mm, "line", at.zs.r, at.zs.x),
        ]
        motor_node = mm
    else:
        at = None
    return StartBlock(motor, k, slip, tuple(nodes), tuple(edges), motor_node, at)


def start_blocks(net: Network, scenario: Scenario, slip_models: Dict[int, SlipStepModel]) -> List[StartBlock]:
    blocks = []
    for motor in started_motors(net, scenario):
        model = slip_models.get(motor.bus)
        if model is None:
            raise ModelBuildError(f"no slip model for motor at bus {motor.bus}")
        for k, s in enumerate(model.slips, start=1):
            blocks.append(block_topology(net, motor, k, float(s)))
    return blocks


def build_slip_models(net: Network, scenario: Scenario, config: Optional[ModelConfig] = None) -> Dict[int, SlipStepModel]:
    config = config or settings.model
    return {
        m.bus: build_slip_model(m, net.s_base, scenario.delta_s, scenario.k_max.get(m.bus), config.stall_margin)
        for m in started_motors(net, scenario)
    }


def _by_motor(blocks: List[StartBlock]) -> Dict[int, List[StartBlock]]:
    out: Dict[int, List[StartBlock]] = defaultdict(list)
    for b in blocks:
        out[b.m].append(b)
    return out


# ----------------------- #
# Symbol helpers
# ----------------------- #
def start_indicator(program: ConicProgram, bus: int, t: int) -> LinExpr:
    """L[bus, t] - L[bus, t-1], with L[bus, -1] = 0."""
    now = program.var(("L", bus, t)).expr()
    return now if t == 0 else now - program.var(("L", bus, t - 1))


def _maybe(program: ConicProgram, symbol) -> LinExpr:
    idx = program.vmap.get(symbol)
    return LinExpr() if idx is None else Var(idx).expr()


def bus_weight(net: Network, bus: int, t: int) -> float:
    """Priority-weighted nominal active power of everything at a bus."""
    w = 0.0
    s = net.static_load_at(bus)
    if s is not None:
        w += s.priority * s.p0_profile[t]
    m = net.motor_at(bus)
    if m is not None:
        w += m.priority * running_load(m, net.s_base)[0]
    return w


# ----------------------- #
# Sequencing
# ----------------------- #
def add_sequencing(program: ConicProgram, net: Network, scenario: Scenario) -> None:
    n = scenario.n_steps
    for bus in net.load_buses:
        row = scenario.l0.get(bus)
        for t in range(n):
            if row is None:
                program.var(("L", bus, t), 1.0, 1.0)
            else:
                program.var(("L", bus, t), binary=True)
        if row is None:
            continue
        for t in range(n):
            L = program.var(("L", bus, t))
            program.add_constraint(L, "<=", float(row[t]), "sequencing")
            if t + 1 < n:
                program.add_constraint(L, "<=", program.var(("L", bus, t + 1)), "monotone")

    motors = [m.bus for m in net.motors if m.bus in scenario.l0]
    if scenario.one_motor_per_step and len(motors) > 1:
        for t in range(n):
            program.add_constraint(lin_sum(start_indicator(program, m, t) for m in motors), "<=", 1.0,
                                   "one_motor_start")


# ----------------------- #
# Load models
# ----------------------- #
def _energized_at_start(program: ConicProgram, scenario: Scenario, bus: int, m: int, t: int) -> LinExpr:
    z = start_indicator(program, m, t)
    if bus == m or bus not in scenario.l0:
        return z
    L = program.var(("L", bus, t))
    return encode_product_bin_cont(program, L, z, 1.0, key=("on", bus, t, m),
                                   family="start_snapshot_product").expr()


def add_load_models(program: ConicProgram, net: Network, scenario: Scenario, blocks: List[StartBlock],
                    slip_models: Dict[int, SlipStepModel], config: ModelConfig) -> None:
    u_max = config.v_max ** 2
    nominal = {m.bus: running_load(m, net.s_base) for m in net.motors}

    for m, mblocks in _by_motor(blocks).items():
        model = slip_models[m]
        cands = start_candidates(scenario, m)
        on: Dict[int, Dict[int, LinExpr]] = {
            bus: {t: _energized_at_start(program, scenario, bus, m, t) for t in cands if scenario.l0_at(bus, t)}
            for bus in net.load_buses
        }

        # nominal demand seen at the start instant
        groups: Dict[int, List[Tuple[float, float, LinExpr]]] = {}
        for s in net.static_loads:
            p0 = program.var(("P0", s.bus, m))
            q0 = program.var(("Q0", s.bus, m))
            program.add_constraint(p0, "==", lin_sum(y * s.p0_profile[t] for t, y in on[s.bus].items()), "nominal_load")
            program.add_constraint(q0, "==", lin_sum(y * s.q0_profile[t] for t, y in on[s.bus].items()), "nominal_load")
            if s.kp == 0 and s.kq == 0:
                continue
            by_value: Dict[Tuple[float, float], List[int]] = {}
            for t in on[s.bus]:
                by_value.setdefault((s.p0_profile[t], s.q0_profile[t]), []).append(t)
            groups[s.bus] = [(p, q, lin_sum(on[s.bus][t] for t in ts)) for (p, q), ts in by_value.items()]
        for other in net.motors:
            if other.bus == m:
                continue
            g_run, b_run = nominal[other.bus]
            p0 = program.var(("P0run", other.bus, m))
            q0 = program.var(("Q0run", other.bus, m))
            program.add_constraint(p0, "==", lin_sum(on[other.bus].values()) * g_run, "nominal_load")
            program.add_constraint(q0, "==", lin_sum(on[other.bus].values()) * b_run, "nominal_load")

        for blk in mblocks:
            k = blk.k
            demand_p: Dict[Node, LinExpr] = defaultdict(LinExpr)
            demand_q: Dict[Node, LinExpr] = defaultdict(LinExpr)
            motor_nodes = set()
            for s in net.static_loads:
                p0 = program.var(("P0", s.bus, m))
                q0 = program.var(("Q0", s.bus, m))
                if s.bus not in groups:
                    demand_p[s.bus] += p0
                    demand_q[s.bus] += q0
                    continue
                U = program.var(("U", s.bus, k, m), 0.0, u_max)
                # P0 * U per profile value, exact at binary e
                wu = [encode_product_bin_cont(program, e, U, u_max, key=("uw", s.bus, g, k, m),
                                              family="load_voltage_product")
                      for g, (_, _, e) in enumerate(groups[s.bus])]
                demand_p[s.bus] += p0 * (1.0 - s.kp / 2.0) + lin_sum(
                    w * (p * s.kp / 2.0) for w, (p, _, _) in zip(wu, groups[s.bus]))
                demand_q[s.bus] += q0 * (1.0 - s.kq / 2.0) + lin_sum(
                    w * (q * s.kq / 2.0) for w, (_, q, _) in zip(wu, groups[s.bus]))
            for other in net.motors:
                if other.bus == m:
                    continue
                demand_p[other.bus] += program.var(("P0run", other.bus, m))
                demand_q[other.bus] += program.var(("Q0run", other.bus, m))
                motor_nodes.add(other.bus)
            u_m = program.var(("U", blk.motor_node, k, m), 0.0, u_max)
            demand_p[blk.motor_node] += u_m * float(model.g[k - 1])
            demand_q[blk.motor_node] += u_m * float(model.b[k - 1])
            motor_nodes.add(blk.motor_node)

            for n in blk.nodes:
                if n not in demand_p:
                    continue
                family = "motor_load" if n in motor_nodes else "static_load"
                program.add_constraint(program.var(("PD", n, k, m)), "==", demand_p[n], family)
                program.add_constraint(program.var(("QD", n, k, m)), "==", demand_q[n], family)


# ----------------------- #
# Branch flow
# ----------------------- #
def _injection(program: ConicProgram, net: Network, n: Node, k: int, m: int) -> Tuple[LinExpr, LinExpr]:
    p, q = LinExpr(), LinExpr()
    if n == net.slack:
        p += program.var(("pSub", n, k, m))
        q += program.var(("qSub", n, k, m))
    for d in net.dgs:
        if d.bus != n:
            continue
        if d.frt:
            p += program.var(("PDG", n, k, m))
            q += program.var(("QDG", n, k, m))
        else:
            p += d.p_set_pu
            q += d.q_set_pu
    return p, q


def add_branch_flow(program: ConicProgram, net: Network, blocks: List[StartBlock], config: ModelConfig) -> None:
    u_max = config.v_max ** 2
    u_slack = net.slack_voltage ** 2
    for blk in blocks:
        k, m = blk.k, blk.m
        U = {n: program.var(("U", n, k, m), 0.0, u_max) for n in blk.nodes}
        program.set_bounds(U[net.slack], u_slack, u_slack)
        if config.substation_limit_pu is not None:
            program.add_cone(config.substation_limit_pu,
                             [program.var(("pSub", net.slack, k, m)), program.var(("qSub", net.slack, k, m))],
                             "substation_limit")

        for e in blk.edges:
            p = program.var(("p", e.i, e.j, k, m))
            q = program.var(("q", e.i, e.j, k, m))
            if e.kind == "ratio":
                continue
            F = program.var(("F", e.i, e.j, k, m), 0.0)
            drop = U[e.i] - (p * e.r + q * e.x) * 2.0
            if config.keep_loss_term:
                drop = drop + F * (e.r ** 2 + e.x ** 2)
            program.add_constraint(U[e.j], "==", drop, "voltage_drop")
            program.add_rotated_cone(F, U[e.i], [p, q], "line_cone")
            if e.f_th is not None:
                program.add_constraint(F, "<=", e.f_th, "ampacity")

        for n in blk.nodes:
            inflow_p, inflow_q = LinExpr(), LinExpr()
            for e in blk.incoming(n):
                inflow_p += program.var(("p", e.i, e.j, k, m))
                inflow_q += program.var(("q", e.i, e.j, k, m))
                if e.kind == "line":
                    F = program.var(("F", e.i, e.j, k, m))
                    inflow_p -= F * e.r
                    inflow_q -= F * e.x
            out_p = lin_sum(program.var(("p", e.i, e.j, k, m)) for e in blk.outgoing(n))
            out_q = lin_sum(program.var(("q", e.i, e.j, k, m)) for e in blk.outgoing(n))
            inj_p, inj_q = _injection(program, net, n, k, m)
            program.add_constraint(inflow_p + inj_p, "==", out_p + _maybe(program, ("PD", n, k, m)), "p_balance")
            program.add_constraint(inflow_q + inj_q, "==", out_q + _maybe(program, ("QD", n, k, m)), "q_balance")


# ----------------------- #
# DG current saturation
# ----------------------- #
def add_dg_saturation(program: ConicProgram, net: Network, blocks: List[StartBlock]) -> None:
    by_motor = _by_motor(blocks)
    for d in net.dgs:
        if not d.frt:
            continue
        if d.f_max_pu is None:
            raise ModelBuildError(f"dg at bus {d.bus} has no ampacity limit")
        f2 = d.f_max_pu ** 2
        for m, mblocks in by_motor.items():
            fp = program.var(("Fp", d.bus, m), 0.0, f2)
            fq = program.var(("Fq", d.bus, m), 0.0, f2)
            program.add_constraint(fp + fq, "==", f2, "dg_current_limit")
            for blk in mblocks:
                U = program.var(("U", d.bus, blk.k, m))
                program.add_rotated_cone(fp, U, [program.var(("PDG", d.bus, blk.k, m))], "dg_p_cone")
                program.add_rotated_cone(fq, U, [program.var(("QDG", d.bus, blk.k, m))], "dg_q_cone")


# ----------------------- #
# Autotransformer
# ----------------------- #
def add_autotransformer(program: ConicProgram, net: Network, blocks: List[StartBlock], config: ModelConfig) -> None:
    u_max = config.v_max ** 2
    for m, mblocks in _by_motor(blocks).items():
        active = [b for b in mblocks if b.autotransformer is not None]
        if not active:
            continue
        at = active[0].autotransformer
        lo, hi = at.tap_range
        worst = at.sigma * max(abs(lo), abs(hi))
        if worst > config.tap_guard:
            logger.warning("autotransformer at %s: |sigma * tap| reaches %.3f > %.3f, linearized ratio is coarse",
                           m, worst, config.tap_guard)
        dr_expr, bits = encode_integer_as_binaries(program, lo, hi, key=("tap", m), family="tap_range")
        dr = program.var(("dr", m), float(lo), float(hi))
        program.add_constraint(dr, "==", dr_expr, "tap_range")

        p_node, s_node, _ = aux_nodes(m)
        for blk in active:
            up = program.var(("U", p_node, blk.k, m))
            us = program.var(("U", s_node, blk.k, m))
            # U_s = U_p (1 + 2 sigma dr), bit * U_p products made exact
            shifted = [
                encode_product_bin_cont(program, b, up, u_max, key=("tap", j, blk.k, m), family="tap_product")
                for j, b in enumerate(bits)
            ]
            rhs = up * (1.0 + 2.0 * at.sigma * lo) + lin_sum(
                y * (2.0 * at.sigma * 2 ** j) for j, y in enumerate(shifted))
            program.add_constraint(us, "==", rhs, "tap_ratio")


# ----------------------- #
# Transient limits
# ----------------------- #
def _curve_limit(program: ConicProgram, curve: ProtectionCurve, elapsed: Var, t_max: float, key: Tuple,
                 where: str, warned: set) -> LinExpr:
    cov = curve.covering(t_max)
    if curve.times[-1] < t_max and where not in warned:
        warned.add(where)
        logger.warning("protection curve at %s ends at %.3g s, extended flat to %.3g s", where, curve.times[-1], t_max)
    if len(set(cov.limits)) == 1:
        return LinExpr({}, cov.limits[0])
    f, _ = encode_pwl(program, elapsed, Breakpoints(np.array(cov.times), np.array(cov.limits)), key,
                      family="protection_pwl", stage=1)
    return f.expr()


def add_transient_limits(program: ConicProgram, net: Network, blocks: List[StartBlock],
                         slip_models: Dict[int, SlipStepModel], config: ModelConfig) -> None:
    u_max = config.v_max ** 2
    warned: set = set()
    for m, mblocks in _by_motor(blocks).items():
        model = slip_models[m]
        eps = model.stall_margin
        h2 = 2.0 * model.h_s * model.delta_s
        t_max = model.k_max * h2 / eps
        dts: List[Var] = []
        lo_sum = hi_sum = 0.0
        stalled = False
        for blk in mblocks:
            k = blk.k
            c = float(model.c[k - 1])
            load = float(model.load_torque[k - 1])
            tele = program.var(("Tele", k, m), 0.0)
            program.add_constraint(tele, "==", program.var(("U", blk.motor_node, k, m)) * c, "electrical_torque")
            program.add_constraint(tele, ">=", load + eps, "torque_margin")
            a_max = c * u_max - load
            if a_max <= eps:
                msg = (f"motor at {m} stalls at step {k}: best accelerating torque {a_max:.4g} "
                       f"at U = {u_max:.4g} is within the stall margin {eps:g}")
                program.certificates.append(msg)
                logger.warning(msg)
                stalled = True
                continue
            if stalled:
                continue

            rate = program.var(("rate", k, m), eps / h2, a_max / h2)
            program.add_constraint(rate * h2, "==", tele - load, "step_rate")
            bp = Breakpoints.log_spaced(reciprocal, eps / h2, a_max / h2, config.pwl_breakpoints)
            dt, _ = encode_pwl(program, rate, bp, key=("dt", k, m), family="pwl", stage=0)
            dts.append(dt)
            lo_sum += float(bp.fs.min())
            hi_sum += float(bp.fs.max())
            elapsed = program.var(("t", k, m), lo_sum, hi_sum)
            program.add_constraint(elapsed, "==", lin_sum(dts), "elapsed_time")

            for n, curve in net.node_curves.items():
                limit = _curve_limit(program, curve, elapsed, t_max, ("umin", n, k, m), f"node {n}", warned)
                program.add_constraint(program.var(("U", n, k, m)), ">=", limit, "undervoltage")
            for (i, j), curve in net.line_curves.items():
                limit = _curve_limit(program, curve, elapsed, t_max, ("fmax", i, j, k, m), f"line {i}-{j}", warned)
                program.add_constraint(program.var(("F", i, j, k, m)), "<=", limit, "overcurrent")
        if stalled:
            # keeps the relaxation infeasible even without the certificate check
            program.add_constraint(LinExpr(), "<=", -1.0, "torque_margin")


# ----------------------- #
# Objective
# ----------------------- #
def add_objective(program: ConicProgram, net: Network, scenario: Scenario, blocks: List[StartBlock]) -> LinExpr:
    h = scenario.step_hours
    reliability = LinExpr()
    for bus in scenario.off_outage:
        if program.vmap.get(("L", bus, 0)) is None:
            continue
        for t in range(scenario.n_steps):
            w = bus_weight(net, bus, t) * h
            if w:
                reliability += (float(scenario.l0_at(bus, t)) - program.var(("L", bus, t))) * w
    operational = lin_sum(
        program.var(("F", e.i, e.j, blk.k, blk.m)) * e.r
        for blk in blocks for e in blk.edges if e.kind == "line" and e.r
    )
    program.parts = {"reliability": reliability, "operational": operational}
    objective = reliability * scenario.w_re + operational * scenario.w_op
    program.set_objective(objective)
    return objective


def build_model(net: Network, scenario: Scenario, slip_models: Dict[int, SlipStepModel],
                config: Optional[ModelConfig] = None) -> Tuple[ConicProgram, VariableMap]:
    config = config or settings.model
    program = ConicProgram(name=f"{net.spec.name or 'network'}/{scenario.spec.name or 'scenario'}")
    program.meta.update(v_max=config.v_max, w_re=scenario.w_re, w_op=scenario.w_op, step_hours=scenario.step_hours)
    program.equation_tags.update(EQUATION_TAGS)
    blocks = start_blocks(net, scenario, slip_models)

    add_sequencing(program, net, scenario)
    add_load_models(program, net, scenario, blocks, slip_models, config)
    add_branch_flow(program, net, blocks, config)
    add_dg_saturation(program, net, blocks)
    add_autotransformer(program, net, blocks, config)
    add_transient_limits(program, net, blocks, slip_models, config)
    add_objective(program, net, scenario, blocks)

    stats = program.stats()
    logger.info("model %s: %d binaries, %d continuous, %d cones, %d SOS2 sets", program.name,
                stats.binaries, stats.continuous, stats.cones, stats.sos2_sets)
    logger.debug("constraint families: %s", stats.constraints)
    return program, program.vmap


# ----------------------- #
# Exactness audit
# ----------------------- #
def _condition(margins: Dict[str, float], tol: float) -> ConditionCheck:
    if not margins:
        return ConditionCheck(passed=True)
    binding = sorted(k for k, v in margins.items() if v <= tol)
    return ConditionCheck(passed=not binding, margin=min(margins.values()), binding=binding)


def check_exactness(net: Network, solution: ModelSolution, tol: float = 1e-6) -> ExactnessReport:
    """Cone residuals and the sufficient conditions for a tight relaxation."""
    v_max = solution.meta.get("v_max", settings.model.v_max)
    w_op = solution.meta.get("w_op", 0.0)

    line_res: Dict[str, float] = {}
    ampacity: Dict[str, float] = {}
    lines = {(ln.from_bus, ln.to_bus): ln for ln in net.lines}
    for sym, idx in solution.vmap.items("F"):
        _, i, j, k, m = sym
        f = float(solution.x[idx])
        p, q = solution[("p", i, j, k, m)], solution[("q", i, j, k, m)]
        s2 = p * p + q * q
        res = abs(f * solution[("U", i, k, m)] - s2) / max(1.0, s2)
        key = f"{i}->{j}@{m}"
        line_res[key] = max(line_res.get(key, 0.0), res)
        ln = lines.get((i, j))
        if ln is not None and ln.ampacity_pu is not None:
            ampacity[key] = min(ampacity.get(key, math.inf), ln.ampacity_pu ** 2 - f)

    dg_res: Dict[str, float] = {}
    fp_fq: Dict[str, float] = {}
    voltage: Dict[str, float] = {}
    for d in net.dgs:
        if not d.frt or d.f_max_pu is None:
            continue
        for sym, idx in solution.vmap.items("Fp"):
            if sym[1] != d.bus:
                continue
            m = sym[2]
            fp, fq = float(solution.x[idx]), solution[("Fq", d.bus, m)]
            fp_fq[f"{d.bus}@{m}"] = abs(fp + fq - d.f_max_pu ** 2)
            k = 1
            while solution.vmap.get(("PDG", d.bus, k, m)) is not None:
                u = solution[("U", d.bus, k, m)]
                for comp, f_ref, sym_p in (("p", fp, "PDG"), ("q", fq, "QDG")):
                    val = solution[(sym_p, d.bus, k, m)]
                    key = f"{d.bus}@{m}:{comp}"
                    dg_res[key] = max(dg_res.get(key, 0.0), abs(f_ref * u - val * val) / max(1.0, val * val))
                key = f"{d.bus}@{m}"
                voltage[key] = min(voltage.get(key, math.inf), v_max ** 2 - u)
                k += 1

    tap_gaps: Dict[str, float] = {}
    for at in net.autotransformers:
        if solution.vmap.get(("dr", at.bus)) is None:
            continue
        dr = round(solution[("dr", at.bus)])
        p_node, _, _ = aux_nodes(at.bus)
        gaps = [solution.x[idx] for sym, idx in solution.vmap.items("U") if sym[1] == p_node]
        tap_gaps[str(at.bus)] = float(max(gaps, default=0.0)) * (at.sigma * dr) ** 2

    unpriced = [f"{ln.from_bus}->{ln.to_bus}" for ln in net.lines if ln.r_pu <= 0]
    objective = ConditionCheck(
        passed=w_op > 0 and not unpriced,
        margin=w_op * min((ln.r_pu for ln in net.lines), default=0.0),
        binding=unpriced if w_op > 0 else ["w_op"],
    )
    cond_v = _condition(voltage, tol)
    cond_a = _condition(ampacity, tol)
    max_line = max(line_res.values(), default=0.0)
    max_dg = max(dg_res.values(), default=0.0)
    residual_ok = max_line <= tol and max_dg <= tol

    if not (cond_v.passed and cond_a.passed and objective.passed):
        verdict = "exactness not guaranteed"
    elif residual_ok:
        verdict = "exact"
    else:
        verdict = "exactness unverified"
    return ExactnessReport(
        max_line_residual=max_line,
        max_dg_residual=max_dg,
        line_residuals=line_res,
        dg_residuals=dg_res,
        fp_fq_residual=fp_fq,
        tap_gaps=tap_gaps,
        condition_voltage=cond_v,
        condition_ampacity=cond_a,
        condition_objective=objective,
        residual_ok=residual_ok,
        verdict=verdict,
    )
