# app/services/simulate.py
"""Quasi-static time-domain replay of a restoration plan.

The network is solved as phasors with a backward-forward sweep at every
integration stage; the starting motor's slip follows the swing equation
integrated with RK4. Relay curves are checked against the sampled trace.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.core.config import SimConfig, settings
from app.core.errors import ConvergenceError, PlanDecodeError, StallError
from app.schemas.network import DgSpec, MotorSpec
from app.schemas.plan import RestorationPlan
from app.schemas.reports import (
    ComparisonReport,
    ElementTrip,
    MotorComparison,
    SnapshotRow,
    StepComparison,
    TripReport,
)
from app.services.mip import aux_nodes
from app.services.motor import (
    SlipStepModel,
    TheveninEquivalent,
    acceleration_schedule,
    electrical_torque,
    input_impedance,
    mechanical_torque,
    peak_torque_slip,
    rated_slip,
    thevenin_at_slip,
    torque_scale,
)
from app.services.netmodel import Edge, Network, ProtectionCurve

logger = logging.getLogger(__name__)

Node = Union[int, str]
BALANCE_TOL = 1e-6
_V_FLOOR = 1e-6
_SLIP_FLOOR = 1e-6


# ----------------------- #
# State
# ----------------------- #
@dataclass
class SimState:
    step: int = 0  # plan time step, selects the load profile entry
    energized: FrozenSet[int] = frozenset()  # load buses switched on
    slips: Dict[int, float] = field(default_factory=dict)  # connected motors
    starting: Optional[int] = None  # motor behind the autotransformer while it is in
    at_in: bool = False
    tap: int = 0
    saturated: Dict[int, Tuple[float, float]] = field(default_factory=dict)  # dg bus -> (ip, iq) p.u.
    voltages: Dict[Node, complex] = field(default_factory=dict)  # warm start, updated by the caller
    t_s: float = 0.0


@dataclass(frozen=True)
class _Branch:
    i: Node
    j: Node
    z: complex = 0j
    ratio: Optional[float] = None  # ideal V_j = ratio * V_i when set


@dataclass
class NetworkSolution:
    voltages: Dict[Node, complex]
    currents: Dict[Node, complex]  # receiving-end branch current into each non-slack node
    motor_nodes: Dict[int, Node]
    iterations: int
    balance_residual: float

    def u(self, node: Node) -> float:
        return abs(self.voltages[node]) ** 2


def _topology(net: Network, state: SimState) -> Tuple[List[Node], Dict[Node, _Branch], Dict[int, Node]]:
    order: List[Node] = list(net.order)
    parent: Dict[Node, _Branch] = {}
    for i, j in net.edges:
        ln = net.line(i, j)
        parent[j] = _Branch(i, j, complex(ln.r_pu, ln.x_pu))
    where: Dict[int, Node] = {b: b for b in state.slips}
    at = net.autotransformer_at(state.starting) if state.starting is not None else None
    if state.at_in and at is not None:
        b = state.starting
        p, s, mm = aux_nodes(b)
        order += [p, s, mm]
        parent[p] = _Branch(b, p, complex(at.zp.r, at.zp.x))
        parent[s] = _Branch(p, s, ratio=1.0 + at.sigma * state.tap)
        parent[mm] = _Branch(s, mm, complex(at.zs.r, at.zs.x))
        where[b] = mm
    return order, parent, where


def _safe(v: complex) -> complex:
    return v if abs(v) >= _V_FLOOR else complex(_V_FLOOR, 0.0)


def dg_injection(dg: DgSpec, state: SimState, v: complex) -> complex:
    """Injected current phasor; saturated units hold (ip, iq) relative to the local voltage angle."""
    v = _safe(v)
    if dg.bus in state.saturated:
        ip, iq = state.saturated[dg.bus]
        return complex(ip, -iq) * v / abs(v)
    return (complex(dg.p_set_pu, dg.q_set_pu) / v).conjugate()


def dg_components(i_inj: complex, v: complex) -> Tuple[float, float]:
    """(active, reactive) parts of an injected current against the voltage phasor."""
    v = _safe(v)
    w = i_inj * v.conjugate() / abs(v)
    return float(w.real), float(-w.imag)


def _motor_admittance(motor: MotorSpec, s: float) -> complex:
    return 1.0 / complex(input_impedance(motor, s))


def _node_currents(net: Network, state: SimState, v: Dict[Node, complex],
                   where: Dict[int, Node]) -> Dict[Node, complex]:
    out: Dict[Node, complex] = defaultdict(complex)
    for sl in net.static_loads:
        if sl.bus not in state.energized:
            continue
        vb = _safe(v[sl.bus])
        mag = abs(vb)
        s = complex(sl.p0_profile[state.step] * mag ** sl.kp, sl.q0_profile[state.step] * mag ** sl.kq)
        out[sl.bus] += (s / vb).conjugate()
    for bus, slip in state.slips.items():
        node = where[bus]
        out[node] += _motor_admittance(net.motor_at(bus), slip) * v[node]
    for dg in net.dgs:
        out[dg.bus] -= dg_injection(dg, state, v[dg.bus])
    return out


def _backward(order: List[Node], parent: Dict[Node, _Branch],
              node_i: Dict[Node, complex]) -> Tuple[Dict[Node, complex], complex]:
    acc = {n: node_i.get(n, 0j) for n in order}
    flows: Dict[Node, complex] = {}
    for n in reversed(order[1:]):
        br = parent[n]
        flows[n] = acc[n]
        acc[br.i] += flows[n] * (br.ratio if br.ratio is not None else 1.0)
    return flows, acc[order[0]]


def _forward(order: List[Node], parent: Dict[Node, _Branch], flows: Dict[Node, complex],
             v_slack: complex) -> Dict[Node, complex]:
    v = {order[0]: v_slack}
    for n in order[1:]:
        br = parent[n]
        v[n] = v[br.i] * br.ratio if br.ratio is not None else v[br.i] - br.z * flows[n]
    return v


def network_solve_quasi_static(net: Network, state: SimState, config: Optional[SimConfig] = None) -> NetworkSolution:
    config = config or settings.simulate
    order, parent, where = _topology(net, state)
    v_slack = complex(net.slack_voltage, 0.0)
    v = {n: state.voltages.get(n, v_slack) for n in order}
    v[order[0]] = v_slack

    delta = math.inf
    for it in range(1, config.sweep_max_iter + 1):
        flows, _ = _backward(order, parent, _node_currents(net, state, v, where))
        new = _forward(order, parent, flows, v_slack)
        delta = max(abs(new[n] - v[n]) for n in order)
        v = new
        if not math.isfinite(delta):
            raise ConvergenceError("network solution diverged (non-finite voltage); voltage collapse",
                                   residual=delta, iterations=it)
        if delta <= config.sweep_tol:
            break
    else:
        raise ConvergenceError(
            f"backward-forward sweep did not converge in {config.sweep_max_iter} iterations "
            f"(max |dV| = {delta:.3g}); voltage collapse",
            residual=delta, iterations=config.sweep_max_iter,
        )

    node_i = _node_currents(net, state, v, where)
    flows, out = _backward(order, parent, node_i)
    s_slack = v_slack * out.conjugate()
    s_sinks = sum((v[n] * i.conjugate() for n, i in node_i.items()), 0j)
    s_loss = sum((abs(flows[n]) ** 2 * parent[n].z for n in flows), 0j)
    residual = abs(s_slack - s_sinks - s_loss)
    if residual > BALANCE_TOL:
        logger.warning("power balance residual %.3g p.u. at t=%.4f s", residual, state.t_s)
    return NetworkSolution(v, flows, where, it, residual)


# ----------------------- #
# Motor start
# ----------------------- #
@dataclass(frozen=True)
class _Machine:
    spec: MotorSpec
    th: TheveninEquivalent
    scale: float

    @classmethod
    def of(cls, spec: MotorSpec, s_base: float) -> "_Machine":
        return cls(spec, thevenin_at_slip(spec), torque_scale(spec, s_base))

    def t_ele(self, s: float, u: float) -> float:
        return electrical_torque(self.th, self.spec.xlr, self.spec.rr, s, u) * self.scale

    def t_load(self, s: float) -> float:
        return float(mechanical_torque(self.spec.mech, s)) + self.spec.kd_pu * (1.0 - s)


def running_slip(motor: MotorSpec, s_base: float) -> float:
    try:
        return max(rated_slip(motor, s_base), 1e-9)
    except StallError:
        return peak_torque_slip(motor)


def plan_state(net: Network, plan: RestorationPlan, step: int) -> SimState:
    """Loads as the plan leaves them at a step, running motors at their rated slip."""
    on = frozenset(r.bus for r in plan.loads if r.l[step])
    slips = {m.bus: running_slip(m, net.s_base) for m in net.motors if m.bus in on}
    return SimState(step=step, energized=on, slips=slips)


@dataclass
class SimTrace:
    motor_bus: int
    dt_s: float
    t: np.ndarray
    slip: np.ndarray
    t_ele: np.ndarray
    t_load: np.ndarray
    i_motor: np.ndarray
    v: Dict[int, np.ndarray]  # |V| per bus
    line_i: Dict[Edge, np.ndarray] = field(default_factory=dict)
    dg_ip: Dict[int, np.ndarray] = field(default_factory=dict)  # p.u.
    dg_iq: Dict[int, np.ndarray] = field(default_factory=dict)
    i_base: float = 1.0
    start_step: Optional[int] = None
    stalled: bool = False
    completed: bool = False
    events: List[Tuple[float, str]] = field(default_factory=list)
    max_balance_residual: float = 0.0

    def crossing_index(self, slip: float) -> Optional[int]:
        """First sample at or below a slip level."""
        hits = np.flatnonzero(self.slip <= slip + 1e-12)
        return int(hits[0]) if len(hits) else None

    def to_frame(self, every: int = 1) -> pd.DataFrame:
        idx = np.arange(0, len(self.t), max(int(every), 1))
        blocks = []
        for bus, v in self.v.items():
            ip, iq = self.dg_ip.get(bus), self.dg_iq.get(bus)
            blocks.append(pd.DataFrame({
                "t_s": self.t[idx],
                "bus": bus,
                "v_pu": v[idx],
                "slip": self.slip[idx],
                "t_ele_pu": self.t_ele[idx],
                "t_load_pu": self.t_load[idx],
                "i_motor_pu": self.i_motor[idx],
                "i_dg_p_a": ip[idx] * self.i_base if ip is not None else np.nan,
                "i_dg_q_a": iq[idx] * self.i_base if iq is not None else np.nan,
            }))
        return pd.concat(blocks, ignore_index=True) if blocks else pd.DataFrame()


class _Recorder:
    def __init__(self, net: Network):
        self.net = net
        self.rows: Dict[str, List[float]] = defaultdict(list)
        self.v: Dict[int, List[float]] = {b: [] for b in net.order}
        self.line_i: Dict[Edge, List[float]] = {e: [] for e in net.edges}
        self.dg_ip: Dict[int, List[float]] = {d.bus: [] for d in net.dgs}
        self.dg_iq: Dict[int, List[float]] = {d.bus: [] for d in net.dgs}
        self.residual = 0.0

    def add(self, t: float, s: float, t_ele: float, t_load: float, i_motor: float,
            sol: NetworkSolution, state: SimState) -> None:
        self.rows["t"].append(t)
        self.rows["slip"].append(s)
        self.rows["t_ele"].append(t_ele)
        self.rows["t_load"].append(t_load)
        self.rows["i_motor"].append(i_motor)
        for b in self.v:
            self.v[b].append(abs(sol.voltages[b]))
        for (i, j) in self.line_i:
            self.line_i[(i, j)].append(abs(sol.currents[j]))
        for d in self.net.dgs:
            ip, iq = dg_components(dg_injection(d, state, sol.voltages[d.bus]), sol.voltages[d.bus])
            self.dg_ip[d.bus].append(ip)
            self.dg_iq[d.bus].append(iq)
        self.residual = max(self.residual, sol.balance_residual)

    def trace(self, motor_bus: int, dt: float, **flags) -> SimTrace:
        arr = {k: np.asarray(v, dtype=float) for k, v in self.rows.items()}
        return SimTrace(
            motor_bus=motor_bus,
            dt_s=dt,
            t=arr["t"],
            slip=arr["slip"],
            t_ele=arr["t_ele"],
            t_load=arr["t_load"],
            i_motor=arr["i_motor"],
            v={b: np.asarray(x) for b, x in self.v.items()},
            line_i={e: np.asarray(x) for e, x in self.line_i.items()},
            dg_ip={b: np.asarray(x) for b, x in self.dg_ip.items()},
            dg_iq={b: np.asarray(x) for b, x in self.dg_iq.items()},
            i_base=self.net.spec.base.i_base,
            max_balance_residual=self.residual,
            **flags,
        )


def simulate_motor_start(net: Network, plan: RestorationPlan, motor_bus: int, dt: Optional[float] = None,
                         config: Optional[SimConfig] = None) -> SimTrace:
    config = config or settings.simulate
    dt = config.dt_s if dt is None else dt
    spec = net.motor_at(motor_bus)
    if spec is None:
        raise PlanDecodeError(f"bus {motor_bus} hosts no motor")
    try:
        start = plan.motor(motor_bus)
    except KeyError as exc:
        raise PlanDecodeError(f"plan has no start record for motor at {motor_bus}") from exc
    if start.start_step is None:
        raise PlanDecodeError(f"plan assigns no start step to motor at {motor_bus}")

    state = plan_state(net, plan, start.start_step)
    state.energized = state.energized | {motor_bus}
    state.slips[motor_bus] = 1.0
    state.starting = motor_bus
    at = net.autotransformer_at(motor_bus)
    if at is not None and start.tap is not None:
        state.at_in, state.tap = True, start.tap
    refs = {r.bus: (r.ip_pu, r.iq_pu) for r in plan.dg_references if r.motor_bus == motor_bus}
    state.saturated = {d.bus: refs[d.bus] for d in net.dgs if d.frt and d.bus in refs}

    mach = _Machine.of(spec, net.s_base)
    s_peak = peak_torque_slip(spec)
    two_h = 2.0 * spec.h_s
    rec = _Recorder(net)
    events: List[Tuple[float, str]] = []
    recovered: Dict[int, float] = {}

    def rate(s: float) -> Tuple[float, NetworkSolution, float, float]:
        state.slips[motor_bus] = s
        sol = network_solve_quasi_static(net, state, config)
        state.voltages = sol.voltages
        te = mach.t_ele(s, sol.u(sol.motor_nodes[motor_bus]))
        tl = mach.t_load(s)
        return -(te - tl) / two_h, sol, te, tl

    def clamp(s: float) -> float:
        return min(1.0, max(s, _SLIP_FLOOR))

    n_max = int(math.ceil(config.detail_window_s / dt - 1e-9))
    s, best, t_best = 1.0, 1.0, 0.0
    stalled = completed = False
    for n in range(n_max + 1):
        t = n * dt
        state.t_s = t
        if state.at_in and 1.0 - s >= at.bypass_speed - 1e-9:
            state.at_in = False
            events.append((t, "autotransformer bypassed"))

        k1, sol, te, tl = rate(s)
        node = sol.motor_nodes[motor_bus]
        i_motor = abs(_motor_admittance(spec, s) * sol.voltages[node])
        rec.add(t, s, te, tl, i_motor, sol, state)

        # the dip is over once the motor reaches its stable branch
        for b in list(state.saturated):
            if s < s_peak and abs(sol.voltages[b]) >= config.dg_exit_voltage_pu:
                since = recovered.setdefault(b, t)
                if t - since >= config.dg_exit_hold_s - 1e-12:
                    del state.saturated[b]
                    events.append((t, f"dg at {b} leaves current saturation"))
            else:
                recovered.pop(b, None)

        if s < s_peak and abs(te - tl) < config.accel_done_torque:
            completed = True
            events.append((t, "acceleration complete"))
            break
        if t - t_best >= config.stall_window_s:
            stalled = True
            events.append((t, "stall"))
            logger.warning("motor at %d stalls at slip %.4f", motor_bus, s)
            break
        if n == n_max:
            break

        k2 = rate(clamp(s + 0.5 * dt * k1))[0]
        k3 = rate(clamp(s + 0.5 * dt * k2))[0]
        k4 = rate(clamp(s + dt * k3))[0]
        s = clamp(s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        if s < best - 1e-9:
            best, t_best = s, (n + 1) * dt

    trace = rec.trace(motor_bus, dt, start_step=start.start_step, stalled=stalled,
                      completed=completed, events=events)
    logger.info("motor at %d: %d samples, stalled=%s, completed=%s", motor_bus, len(trace.t), stalled, completed)
    return trace


# ----------------------- #
# Protection
# ----------------------- #
def _element(name: str, kind: str, t: np.ndarray, margin: np.ndarray) -> ElementTrip:
    bad = np.flatnonzero(margin < 0)
    return ElementTrip(
        element=name,
        kind=kind,
        passed=not len(bad),
        min_margin=float(margin.min()) if len(margin) else math.inf,
        first_violation_s=float(t[bad[0]]) if len(bad) else None,
    )


def check_protection(trace: SimTrace, node_curves: Optional[Dict[int, ProtectionCurve]] = None,
                     line_curves: Optional[Dict[Edge, ProtectionCurve]] = None) -> TripReport:
    """Margins in p.u. magnitude; time runs from the motor energization instant."""
    elements: List[ElementTrip] = []
    for bus, curve in sorted((node_curves or {}).items()):
        if bus in trace.v:
            margin = trace.v[bus] - curve.magnitude_at(trace.t)
            elements.append(_element(f"bus {bus}", "under_voltage", trace.t, margin))
    for (i, j), curve in sorted((line_curves or {}).items()):
        if (i, j) in trace.line_i:
            margin = curve.magnitude_at(trace.t) - trace.line_i[(i, j)]
            elements.append(_element(f"line {i}-{j}", "over_current", trace.t, margin))
    return TripReport(elements=elements)


# ----------------------- #
# Plan validation
# ----------------------- #
def _end_slip(trace: SimTrace, s_last: float, delta_s: float) -> float:
    end = s_last - delta_s
    if trace.completed:
        stable = float(trace.slip[-1])
        end = max(end, stable + 0.5 * (s_last - stable))
    return end


def compare_motor_start(net: Network, plan: RestorationPlan, motor_bus: int, model: SlipStepModel,
                        config: SimConfig) -> Tuple[MotorComparison, Optional[SimTrace]]:
    ms = plan.motor(motor_bus)
    try:
        trace = simulate_motor_start(net, plan, motor_bus, config=config)
    except ConvergenceError as exc:
        logger.warning("motor at %d: %s", motor_bus, exc)
        return MotorComparison(
            bus=motor_bus, stalled=False, steps=[], max_deviation=math.inf, max_deviation_early=math.inf,
            accel_time_model_s=ms.predicted_time_s, accel_time_predicted_s=None, accel_time_sim_s=None,
            accel_ratio=None, protection=TripReport(), failures=["convergence"],
        ), None

    monitored = [motor_bus] + [n for n in sorted(net.node_curves) if n != motor_bus]
    steps: List[StepComparison] = []
    max_dev = max_early = 0.0
    for st in ms.steps:
        idx = trace.crossing_index(st.slip)
        devs: Dict[str, float] = {}
        if idx is not None:
            for n in monitored:
                devs[str(n)] = abs(float(trace.v[n][idx]) ** 2 - ms.bus_u[str(n)][st.k - 1])
        t_sim = float(trace.t[idx]) if idx is not None else None
        early = t_sim is not None and t_sim < config.early_window_s
        worst = max(devs.values(), default=0.0)
        if early:
            max_early = max(max_early, worst)
        else:
            max_dev = max(max_dev, worst)
        steps.append(StepComparison(k=st.k, slip=st.slip, t_model_s=st.t_s, t_sim_s=t_sim, early=early, deviations=devs))

    failures: List[str] = []
    if trace.stalled:
        failures.append("stall")
    if max_dev > config.voltage_tol_pu:
        failures.append("voltage_deviation")

    t_sim = None
    if ms.steps:
        idx = trace.crossing_index(_end_slip(trace, ms.steps[-1].slip, model.delta_s))
        t_sim = float(trace.t[idx]) if idx is not None else None
    ratio = t_sim / ms.predicted_time_s if t_sim is not None and ms.predicted_time_s > 0 else None
    if ms.steps and (ratio is None or abs(ratio - 1.0) > config.accel_time_tol):
        failures.append("accel_time")

    predicted = None
    try:
        predicted = float(acceleration_schedule(model, [st.u_motor for st in ms.steps])[1][-1])
    except StallError as exc:
        logger.warning("slip model for motor at %d predicts a stall: %s", motor_bus, exc)
        failures.append("stall_predicted")
    if predicted is not None and (t_sim is None or abs(t_sim / predicted - 1.0) > config.accel_time_tol):
        failures.append("accel_time_predicted")

    protection = check_protection(trace, net.node_curves, net.line_curves)
    if not protection.passed:
        failures.append("protection")
    if trace.max_balance_residual > BALANCE_TOL:
        failures.append("power_balance")

    return MotorComparison(
        bus=motor_bus,
        stalled=trace.stalled,
        steps=steps,
        max_deviation=max_dev,
        max_deviation_early=max_early,
        accel_time_model_s=ms.predicted_time_s,
        accel_time_predicted_s=predicted,
        accel_time_sim_s=t_sim,
        accel_ratio=ratio,
        protection=protection,
        failures=failures,
    ), trace


def steady_state_snapshots(net: Network, plan: RestorationPlan, config: Optional[SimConfig] = None) -> List[SnapshotRow]:
    config = config or settings.simulate
    rows: List[SnapshotRow] = []
    warm: Dict[Node, complex] = {}
    for t, label in enumerate(plan.labels):
        state = plan_state(net, plan, t)
        state.voltages = warm
        try:
            sol = network_solve_quasi_static(net, state, config)
        except ConvergenceError as exc:
            logger.warning("snapshot %s: %s", label, exc)
            continue
        warm = sol.voltages
        mags = {b: abs(sol.voltages[b]) for b in net.order}
        bus = min(mags, key=mags.get)
        rows.append(SnapshotRow(step=t, label=label, min_v_pu=mags[bus], min_v_bus=bus))
    return rows


def validate_plan_with_traces(net: Network, plan: RestorationPlan, slip_models: Dict[int, SlipStepModel],
                              config: Optional[SimConfig] = None) -> Tuple[ComparisonReport, Dict[int, SimTrace]]:
    config = config or settings.simulate
    starts = [ms.bus for ms in plan.motors if ms.start_step is not None]
    missing = [b for b in starts if b not in slip_models]
    if missing:
        raise PlanDecodeError(f"no slip model for started motors {missing}")

    # motor-start windows are independent
    results = Parallel(n_jobs=config.n_jobs)(
        delayed(compare_motor_start)(net, plan, bus, slip_models[bus], config) for bus in starts
    )
    report = ComparisonReport(motors=[r for r, _ in results], snapshots=steady_state_snapshots(net, plan, config))
    traces = {r.bus: tr for r, tr in results if tr is not None}
    for m in report.motors:
        level = logging.INFO if m.passed else logging.WARNING
        logger.log(level, "motor at %d: max |dU| %.4g (early %.4g), accel ratio %s, failures %s",
                   m.bus, m.max_deviation, m.max_deviation_early,
                   "n/a" if m.accel_ratio is None else f"{m.accel_ratio:.3f}", m.failures or "none")
    return report, traces


def validate_plan(net: Network, plan: RestorationPlan, slip_models: Dict[int, SlipStepModel],
                  config: Optional[SimConfig] = None) -> ComparisonReport:
    return validate_plan_with_traces(net, plan, slip_models, config)[0]
