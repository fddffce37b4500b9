# app/services/netmodel.py
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Tuple

import networkx as nx
import numpy as np
from pydantic import ValidationError

from app.core.config import ModelConfig, settings
from app.core.errors import DanglingReferenceError, InvalidBaseError, SchemaError, TopologyError
from app.schemas.network import (
    AutotransformerSpec,
    DgSpec,
    LineSpec,
    MotorSpec,
    NetworkFile,
    StaticLoadSpec,
)
from app.schemas.reports import ValidationReport, Violation
from app.schemas.scenario import ScenarioFile

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


# ----------------------- #
# Domain types
# ----------------------- #
@dataclass(frozen=True)
class ProtectionCurve:
    """Relay limit vs elapsed time. Limits are squared magnitudes (U or F units)."""

    kind: Literal["under_voltage", "over_current"]
    times: Tuple[float, ...]
    limits: Tuple[float, ...]

    @classmethod
    def from_magnitudes(cls, kind, points: Iterable[Tuple[float, float]]) -> "ProtectionCurve":
        pts = list(points)
        return cls(kind, tuple(float(t) for t, _ in pts), tuple(float(v) ** 2 for _, v in pts))

    def limit_at(self, t) -> np.ndarray:
        # flat beyond both ends
        return np.interp(t, self.times, self.limits)

    def magnitude_at(self, t) -> np.ndarray:
        return np.sqrt(self.limit_at(t))

    def covering(self, t_end: float) -> "ProtectionCurve":
        """Same curve with breakpoints at 0 and t_end so a PWL over [0, t_end] sees it whole."""
        times, limits = list(self.times), list(self.limits)
        if times[0] > 0.0:
            times.insert(0, 0.0)
            limits.insert(0, limits[0])
        if times[-1] < t_end:
            times.append(float(t_end))
            limits.append(limits[-1])
        return ProtectionCurve(self.kind, tuple(times), tuple(limits))


@dataclass(frozen=True, eq=False)
class Network:
    spec: NetworkFile  # motors already in p.u.
    graph: nx.DiGraph  # closed lines, oriented away from the slack
    slack: int

    @cached_property
    def order(self) -> Tuple[int, ...]:
        return (self.slack,) + tuple(v for _, v in nx.bfs_edges(self.graph, self.slack))

    @cached_property
    def parent(self) -> Dict[int, int]:
        return {v: u for u, v in self.graph.edges}

    @property
    def buses(self) -> Tuple[int, ...]:
        return tuple(b.id for b in self.spec.buses)

    @property
    def lines(self) -> List[LineSpec]:
        return [self.graph.edges[e]["line"] for e in self.edges]

    @cached_property
    def edges(self) -> List[Edge]:
        # parent-first order
        return [(self.parent[v], v) for v in self.order[1:]]

    def line(self, i: int, j: int) -> LineSpec:
        return self.graph.edges[i, j]["line"]

    def children(self, i: int) -> List[int]:
        return [v for v in self.order if self.parent.get(v) == i]

    @property
    def static_loads(self) -> List[StaticLoadSpec]:
        return list(self.spec.static_loads)

    @property
    def motors(self) -> List[MotorSpec]:
        return list(self.spec.motors)

    @property
    def dgs(self) -> List[DgSpec]:
        return list(self.spec.dgs)

    @property
    def autotransformers(self) -> List[AutotransformerSpec]:
        return list(self.spec.autotransformers)

    def motor_at(self, bus: int) -> Optional[MotorSpec]:
        return next((m for m in self.spec.motors if m.bus == bus), None)

    def static_load_at(self, bus: int) -> Optional[StaticLoadSpec]:
        return next((s for s in self.spec.static_loads if s.bus == bus), None)

    def autotransformer_at(self, bus: int) -> Optional[AutotransformerSpec]:
        return next((a for a in self.spec.autotransformers if a.bus == bus), None)

    @property
    def load_buses(self) -> List[int]:
        found = {s.bus for s in self.spec.static_loads} | {m.bus for m in self.spec.motors}
        return [b for b in self.order if b in found]

    @property
    def horizon_length(self) -> int:
        lengths = {len(s.p0_profile) for s in self.spec.static_loads}
        return max(lengths) if lengths else 0

    @cached_property
    def node_curves(self) -> Dict[int, ProtectionCurve]:
        return {
            c.bus: ProtectionCurve.from_magnitudes("under_voltage", c.curve)
            for c in self.spec.protection.nodes
        }

    @cached_property
    def line_curves(self) -> Dict[Edge, ProtectionCurve]:
        out: Dict[Edge, ProtectionCurve] = {}
        for c in self.spec.protection.lines:
            key = (c.from_bus, c.to_bus)
            if not self.graph.has_edge(*key):
                key = (c.to_bus, c.from_bus)
            if self.graph.has_edge(*key):
                out[key] = ProtectionCurve.from_magnitudes("over_current", c.curve)
        return out

    @property
    def v_base(self) -> float:
        return self.spec.base.voltage_v

    @property
    def s_base(self) -> float:
        return self.spec.base.power_va

    @property
    def slack_voltage(self) -> float:
        return self.spec.slack_voltage_pu


# ----------------------- #
# Per-unit helpers
# ----------------------- #
def to_per_unit(params: MotorSpec, v_base: float, s_base: float) -> MotorSpec:
    if v_base <= 0 or s_base <= 0:
        raise InvalidBaseError(f"bases must be positive (v_base={v_base}, s_base={s_base})")
    z_base = v_base ** 2 / s_base
    return params.model_copy(
        update={
            "rs": params.rs / z_base,
            "xls": params.xls / z_base,
            "rr": params.rr / z_base,
            "xlr": params.xlr / z_base,
            "xm": params.xm / z_base,
            "unit": "pu",
        }
    )


def synchronous_speed(motor: MotorSpec) -> float:
    return 2.0 * math.pi * motor.freq_hz / (motor.poles / 2.0)


def torque_base_nm(motor: MotorSpec) -> float:
    return motor.rated_va / synchronous_speed(motor)


def _normalize_motor(motor: MotorSpec, v_base: float, s_base: float) -> MotorSpec:
    if motor.unit == "ohm":
        motor = to_per_unit(motor, v_base, s_base)
    mech = motor.mech
    if mech.t_nom_pu is None and mech.t_nom_nm is not None and motor.rated_va > 0:
        mech = mech.model_copy(update={"t_nom_pu": mech.t_nom_nm / torque_base_nm(motor)})
        motor = motor.model_copy(update={"mech": mech})
    return motor


# ----------------------- #
# Ingestion
# ----------------------- #
def _schema_message(exc: ValidationError) -> str:
    err = exc.errors()[0]
    loc = ".".join(str(p) for p in err["loc"])
    return f"{loc}: {err['msg']}"


def _orient(spec: NetworkFile) -> Tuple[nx.DiGraph, int]:
    slacks = [b.id for b in spec.buses if b.slack]
    if len(slacks) != 1:
        raise TopologyError(f"expected exactly one slack bus, found {len(slacks)}")
    slack = slacks[0]

    closed = [ln for ln in spec.lines if ln.closed]
    g = nx.Graph()
    g.add_nodes_from(b.id for b in spec.buses)
    for ln in closed:
        if ln.from_bus == ln.to_bus:
            raise TopologyError(f"line {ln.from_bus}-{ln.to_bus} is a self loop")
        if g.has_edge(ln.from_bus, ln.to_bus):
            raise TopologyError(f"parallel lines between {ln.from_bus} and {ln.to_bus} form a cycle")
        g.add_edge(ln.from_bus, ln.to_bus, line=ln)
    if not nx.is_connected(g):
        raise TopologyError("closed lines do not reach every bus from the slack")
    if not nx.is_tree(g):
        cycle = nx.find_cycle(g)
        raise TopologyError(f"closed lines are not radial; cycle through {[u for u, _ in cycle]}")

    dg = nx.DiGraph()
    dg.add_nodes_from(g.nodes)
    for u, v in nx.bfs_edges(g, slack):
        ln: LineSpec = g.edges[u, v]["line"]
        if ln.from_bus != u:
            ln = ln.model_copy(update={"from_bus": u, "to_bus": v})
        dg.add_edge(u, v, line=ln)
    return dg, slack


def _check_references(spec: NetworkFile) -> None:
    ids = [b.id for b in spec.buses]
    if len(set(ids)) != len(ids):
        raise SchemaError("buses: duplicate bus id")
    known = set(ids)

    def need(bus: int, what: str) -> None:
        if bus not in known:
            raise DanglingReferenceError(f"{what} references unknown bus {bus}")

    for ln in spec.lines:
        need(ln.from_bus, f"line {ln.from_bus}-{ln.to_bus}")
        need(ln.to_bus, f"line {ln.from_bus}-{ln.to_bus}")
    for s in spec.static_loads:
        need(s.bus, "static load")
    for m in spec.motors:
        need(m.bus, "motor")
    for d in spec.dgs:
        need(d.bus, "dg")
    for a in spec.autotransformers:
        need(a.bus, "autotransformer")
    for c in spec.protection.nodes:
        need(c.bus, "node protection curve")
    pairs = {frozenset((ln.from_bus, ln.to_bus)) for ln in spec.lines}
    for c in spec.protection.lines:
        if frozenset((c.from_bus, c.to_bus)) not in pairs:
            raise DanglingReferenceError(f"line protection curve references unknown line {c.from_bus}-{c.to_bus}")


def load_network(data: dict) -> Network:
    try:
        spec = NetworkFile.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(_schema_message(exc)) from exc
    _check_references(spec)
    if spec.base.power_va > 0 and spec.base.voltage_v > 0:
        motors = [_normalize_motor(m, spec.base.voltage_v, spec.base.power_va) for m in spec.motors]
        spec = spec.model_copy(update={"motors": motors})
    graph, slack = _orient(spec)
    return Network(spec=spec, graph=graph, slack=slack)


def parse_network(path: str | Path) -> Network:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return load_network(data)


def dump_network(net: Network) -> dict:
    return net.spec.model_dump(mode="json", by_alias=True)


def apply_topology(net: Network, closed_lines: Iterable[Edge]) -> Network:
    """Network with exactly the given lines closed (stage-1 switch state)."""
    wanted = {frozenset(e) for e in closed_lines}
    known = {frozenset((ln.from_bus, ln.to_bus)) for ln in net.spec.lines}
    missing = wanted - known
    if missing:
        pair = sorted(next(iter(missing)))
        raise DanglingReferenceError(f"closed line {pair[0]}-{pair[-1]} is not in the network")
    lines = [
        ln.model_copy(update={"closed": frozenset((ln.from_bus, ln.to_bus)) in wanted})
        for ln in net.spec.lines
    ]
    spec = net.spec.model_copy(update={"lines": lines})
    graph, slack = _orient(spec)
    return Network(spec=spec, graph=graph, slack=slack)


# ----------------------- #
# Validation
# ----------------------- #
def _curve_violations(kind: str, where: str, curve: List[Tuple[float, float]]) -> List[Violation]:
    out: List[Violation] = []
    if len(curve) < 1:
        return [Violation(code="curve_empty", message=f"{where}: protection curve has no points")]
    times = np.array([p[0] for p in curve], dtype=float)
    values = np.array([p[1] for p in curve], dtype=float)
    if np.any(np.diff(times) <= 0) or times[0] < 0:
        out.append(Violation(code="curve_time_axis", message=f"{where}: times must start at >= 0 and strictly increase"))
    if np.any(values <= 0):
        out.append(Violation(code="curve_limit", message=f"{where}: limits must be positive"))
    if kind == "under_voltage" and np.any(np.diff(values) < 0):
        out.append(Violation(code="curve_uv_shape", message=f"{where}: under-voltage limits must not decrease in time"))
    if kind == "over_current" and np.any(np.diff(values) > 0):
        out.append(Violation(code="curve_oc_shape", message=f"{where}: over-current limits must not increase in time"))
    return out


def validate_network(net: Network) -> ValidationReport:
    spec = net.spec
    v: List[Violation] = []

    def add(code: str, message: str) -> None:
        v.append(Violation(code=code, message=message))

    if spec.base.power_va <= 0 or spec.base.voltage_v <= 0:
        add("base", "base power and voltage must be positive")
    if spec.slack_voltage_pu <= 0:
        add("slack_voltage", "slack voltage must be positive")

    for ln in spec.lines:
        name = f"line {ln.from_bus}-{ln.to_bus}"
        if ln.r_pu < 0 or ln.x_pu < 0:
            add("line_impedance", f"{name}: impedance must be >= 0")
        if ln.ampacity_pu is not None and ln.ampacity_pu <= 0:
            add("line_ampacity", f"{name}: ampacity must be positive")

    lengths = set()
    seen_loads = set()
    for s in spec.static_loads:
        if s.bus in seen_loads:
            add("duplicate_load", f"bus {s.bus}: more than one static load")
        seen_loads.add(s.bus)
        if len(s.p0_profile) != len(s.q0_profile):
            add("profile_length", f"static load at {s.bus}: P and Q profiles differ in length")
        lengths.add(len(s.p0_profile))
        lengths.add(len(s.q0_profile))
        if s.priority < 0:
            add("load_priority", f"static load at {s.bus}: priority must be >= 0")
    if len(lengths) > 1:
        add("profile_length", f"profiles have different horizon lengths {sorted(lengths)}")

    seen_motors = set()
    for m in spec.motors:
        name = f"motor at {m.bus}"
        if m.bus in seen_motors:
            add("duplicate_motor", f"bus {m.bus}: more than one motor")
        seen_motors.add(m.bus)
        if min(m.rs, m.xls, m.rr, m.xlr, m.xm) <= 0:
            add("motor_impedance", f"{name}: impedances must be > 0")
        if m.h_s <= 0:
            add("motor_inertia", f"{name}: H must be > 0")
        if m.kd_pu < 0:
            add("motor_damping", f"{name}: Kd must be >= 0")
        if m.rated_va <= 0:
            add("motor_rating", f"{name}: rated power must be > 0")
        if m.mech.t_nom_pu is None or m.mech.t_nom_pu < 0:
            add("motor_load_torque", f"{name}: nominal load torque missing or negative")

    seen_dgs = set()
    for d in spec.dgs:
        if d.bus in seen_dgs:
            add("duplicate_dg", f"bus {d.bus}: more than one dg")
        seen_dgs.add(d.bus)
        if d.frt and (d.f_max_pu is None or d.f_max_pu <= 0):
            add("dg_ampacity", f"dg at {d.bus}: f_max must be > 0")

    for a in spec.autotransformers:
        name = f"autotransformer at {a.bus}"
        lo, hi = a.tap_range
        if a.sigma <= 0:
            add("at_sigma", f"{name}: sigma must be > 0")
        if lo != -hi or lo > hi:
            add("at_taps", f"{name}: tap range must be symmetric, got [{lo}, {hi}]")
        if not 0.0 < a.bypass_speed < 1.0:
            add("at_bypass", f"{name}: bypass speed fraction must be in (0, 1)")
        if net.motor_at(a.bus) is None:
            add("at_motor", f"{name}: no motor at this bus")

    curved = {c.bus for c in spec.protection.nodes}
    for c in spec.protection.nodes:
        v.extend(_curve_violations("under_voltage", f"node {c.bus}", c.curve))
    for c in spec.protection.lines:
        v.extend(_curve_violations("over_current", f"line {c.from_bus}-{c.to_bus}", c.curve))
    for b in spec.buses:
        if b.protected and b.id not in curved:
            add("protected_flag", f"bus {b.id} is flagged protected but has no curve")
    curved_lines = {frozenset((c.from_bus, c.to_bus)) for c in spec.protection.lines}
    for ln in spec.lines:
        if ln.protected and frozenset((ln.from_bus, ln.to_bus)) not in curved_lines:
            add("protected_flag", f"line {ln.from_bus}-{ln.to_bus} is flagged protected but has no curve")

    return ValidationReport(violations=v)


# ----------------------- #
# Scenario
# ----------------------- #
@dataclass(frozen=True, eq=False)
class Scenario:
    spec: ScenarioFile
    labels: Tuple[str, ...]
    step_minutes: int
    l0: Dict[int, Tuple[int, ...]]  # off-outage buses only
    w_re: float
    w_op: float
    delta_s: float
    k_max: Dict[int, int]
    one_motor_per_step: bool = True

    @property
    def n_steps(self) -> int:
        return len(self.labels)

    @property
    def step_hours(self) -> float:
        return self.step_minutes / 60.0

    @property
    def off_outage(self) -> List[int]:
        return sorted(self.l0)

    def l0_at(self, bus: int, t: int) -> int:
        row = self.l0.get(bus)
        return 1 if row is None else row[t]


def _minutes(hhmm: str) -> int:
    try:
        h, m = hhmm.split(":")
        return int(h) * 60 + int(m)
    except ValueError as exc:
        raise SchemaError(f"horizon: bad time {hhmm!r}, expected HH:MM") from exc


def _labels(start: str, end: str, step: int) -> Tuple[str, ...]:
    t0, t1 = _minutes(start), _minutes(end)
    if t1 <= t0:
        t1 += 24 * 60
    if step <= 0 or (t1 - t0) % step:
        raise SchemaError(f"horizon: {start}-{end} is not a whole number of {step}-minute steps")
    return tuple(f"{(t // 60) % 24:02d}:{t % 60:02d}" for t in range(t0, t1, step))


def load_scenario(data: dict, config: Optional[ModelConfig] = None) -> Scenario:
    config = config or settings.model
    try:
        spec = ScenarioFile.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(_schema_message(exc)) from exc
    h = spec.horizon
    return Scenario(
        spec=spec,
        labels=_labels(h.start, h.end, h.step_minutes),
        step_minutes=h.step_minutes,
        l0={int(b): tuple(int(x) for x in row) for b, row in spec.l0.items()},
        w_re=config.w_re if spec.w_re is None else spec.w_re,
        w_op=config.w_op if spec.w_op is None else spec.w_op,
        delta_s=config.delta_s if spec.delta_s is None else spec.delta_s,
        k_max={int(b): int(k) for b, k in spec.k_max.items()},
        one_motor_per_step=spec.one_motor_per_step,
    )


def parse_scenario(path: str | Path, config: Optional[ModelConfig] = None) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return load_scenario(data, config)


def scenario_network(net: Network, scenario: Scenario) -> Network:
    if scenario.spec.closed_lines is None:
        return net
    return apply_topology(net, scenario.spec.closed_lines)


def validate_scenario(scenario: Scenario, net: Network) -> ValidationReport:
    v: List[Violation] = []
    n = scenario.n_steps
    loads = set(net.load_buses)
    for bus, row in scenario.l0.items():
        if bus not in loads:
            v.append(Violation(code="l0_bus", message=f"L0 row for bus {bus} which hosts no load"))
        if len(row) != n:
            v.append(Violation(code="l0_length", message=f"L0 row for bus {bus} has {len(row)} steps, horizon has {n}"))
        if any(x not in (0, 1) for x in row):
            v.append(Violation(code="l0_binary", message=f"L0 row for bus {bus} is not 0/1"))
        elif any(b < a for a, b in zip(row, row[1:])):
            v.append(Violation(code="l0_monotone", message=f"L0 row for bus {bus} de-energizes a restored load"))
    if net.horizon_length and net.horizon_length != n:
        v.append(Violation(code="profile_length", message=f"profiles have {net.horizon_length} steps, horizon has {n}"))
    if scenario.delta_s <= 0 or scenario.delta_s >= 1:
        v.append(Violation(code="delta_s", message="slip step must be in (0, 1)"))
    for bus, k in scenario.k_max.items():
        if net.motor_at(bus) is None:
            v.append(Violation(code="k_max_bus", message=f"k_max given for bus {bus} which hosts no motor"))
        if k < 1 or 1.0 - (k - 1) * scenario.delta_s <= 0:
            v.append(Violation(code="k_max", message=f"k_max={k} at bus {bus} runs the slip grid to <= 0"))
    return ValidationReport(violations=v)
