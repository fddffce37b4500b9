import numpy as np
import pytest

from app.core.config import SimConfig
from app.core.errors import ConvergenceError, PlanDecodeError
from app.schemas.network import DgSpec
from app.services.motor import input_admittance
from app.services.netmodel import ProtectionCurve, load_network, parse_network
from app.services.simulate import (
    SimState,
    SimTrace,
    check_protection,
    dg_components,
    dg_injection,
    network_solve_quasi_static,
    running_slip,
    simulate_motor_start,
    steady_state_snapshots,
)
from conftest import bare_plan, motor_dict


def motor_bus_network(mech=None, **extra):
    d = {
        "name": "motor_feeder",
        "base": {"power_va": 4000, "voltage_v": 400},
        "buses": [{"id": 1, "slack": True}, {"id": 2}],
        "lines": [{"from": 1, "to": 2, "r_pu": 0.002, "x_pu": 0.004}],
        "static_loads": [{"bus": 2, "p0_profile": [0.2], "q0_profile": [0.05]}],
        "motors": [motor_dict(2, mech)],
    }
    d.update(extra)
    return load_network(d)


def test_two_bus_matches_fixed_point(data_dir):
    net = parse_network(data_dir / "two_bus.json")
    sol = network_solve_quasi_static(net, SimState(energized=frozenset({2})))
    z, s = complex(0.01, 0.01), complex(0.5, 0.2)
    v = 1.0 + 0j
    for _ in range(200):
        v = 1.0 - z * (s / v).conjugate()
    assert sol.voltages[2] == pytest.approx(v, abs=1e-8)
    assert sol.u(2) == pytest.approx(0.98594, abs=1e-5)
    assert sol.balance_residual < 1e-6


def test_unloaded_network_sits_at_slack_voltage(data_dir):
    net = parse_network(data_dir / "two_bus.json")
    sol = network_solve_quasi_static(net, SimState())
    assert sol.voltages[2] == pytest.approx(1.0 + 0j)
    assert sol.currents[2] == pytest.approx(0j)


def test_locked_rotor_current():
    net = motor_bus_network()
    sol = network_solve_quasi_static(net, SimState(slips={2: 1.0}))
    g, b = input_admittance(net.motor_at(2), 1.0)
    assert abs(sol.currents[2]) == pytest.approx(abs(sol.voltages[2]) * abs(complex(g, -b)), rel=1e-9)
    assert abs(sol.voltages[2]) < 1.0


def test_autotransformer_ratio_branch(data_dir):
    net = parse_network(data_dir / "fixed_torque_replica.json")
    state = SimState(energized=frozenset({10, 24, 20}), slips={20: 1.0}, starting=20, at_in=True, tap=-2)
    sol = network_solve_quasi_static(net, state)
    assert sol.motor_nodes[20] == "20:m"
    assert sol.voltages["20:s"] == pytest.approx(0.9 * sol.voltages["20:p"], abs=1e-12)
    assert sol.u("20:m") < sol.u(20)
    assert sol.balance_residual < 1e-6


def test_saturated_dg_holds_its_current_components():
    dg = DgSpec(bus=3, f_max_pu=0.4, p_set_pu=0.2)
    v = complex(0.8, -0.3)
    state = SimState(saturated={3: (0.3, 0.1)})
    assert dg_components(dg_injection(dg, state, v), v) == pytest.approx((0.3, 0.1))
    ip, iq = dg_components(dg_injection(dg, SimState(), v), v)
    assert ip == pytest.approx(0.2 / abs(v))
    assert iq == pytest.approx(0.0, abs=1e-12)


def test_sweep_divergence_is_reported(data_dir):
    net = parse_network(data_dir / "two_bus.json")
    with pytest.raises(ConvergenceError) as err:
        network_solve_quasi_static(net, SimState(energized=frozenset({2})), SimConfig(sweep_max_iter=1))
    assert err.value.iterations == 1


def test_light_load_start_completes():
    net = motor_bus_network()
    plan = bare_plan([(2, "mixed")], motor_bus=2)
    trace = simulate_motor_start(net, plan, 2, dt=0.002)
    assert trace.completed and not trace.stalled
    assert np.all(np.diff(trace.slip) <= 1e-12)
    assert trace.slip[-1] == pytest.approx(running_slip(net.motor_at(2), net.s_base), abs=5e-3)
    assert trace.t[-1] < 2.0
    frame = trace.to_frame(every=5)
    assert list(frame.columns) == ["t_s", "bus", "v_pu", "slip", "t_ele_pu", "t_load_pu", "i_motor_pu",
                                   "i_dg_p_a", "i_dg_q_a"]
    assert set(frame["bus"]) == {1, 2}


def test_overloaded_motor_stalls():
    net = motor_bus_network({"kind": "constant", "t_nom_pu": 2.0})
    plan = bare_plan([(2, "mixed")], motor_bus=2)
    trace = simulate_motor_start(net, plan, 2, dt=0.005)
    assert trace.stalled and not trace.completed
    assert trace.slip.max() == 1.0
    assert trace.t[-1] == pytest.approx(0.5, abs=0.01)


def test_plan_without_start_is_rejected():
    net = motor_bus_network()
    with pytest.raises(PlanDecodeError):
        simulate_motor_start(net, bare_plan([(2, "mixed")]), 2)
    with pytest.raises(PlanDecodeError):
        simulate_motor_start(net, bare_plan([(2, "mixed")], motor_bus=2), 1)


def test_snapshots_report_lowest_bus():
    net = motor_bus_network()
    rows = steady_state_snapshots(net, bare_plan([(2, "mixed")]))
    assert len(rows) == 1
    assert rows[0].min_v_bus == 2
    assert rows[0].min_v_pu < 1.0


def _trace(v_motor: np.ndarray, line_i: np.ndarray = None) -> SimTrace:
    t = np.linspace(0.0, 2.0, 201)
    ones = np.ones_like(t)
    return SimTrace(motor_bus=5, dt_s=0.01, t=t, slip=ones, t_ele=ones, t_load=ones, i_motor=ones,
                    v={5: v_motor}, line_i={} if line_i is None else {(4, 5): line_i})


def test_protection_margin_on_flat_voltage():
    tr = _trace(np.full(201, 0.75))
    report = check_protection(tr, {5: ProtectionCurve.from_magnitudes("under_voltage", [(0.0, 0.7), (2.0, 0.7)])})
    (e,) = report.elements
    assert report.passed
    assert e.element == "bus 5"
    assert e.min_margin == pytest.approx(0.05)
    assert e.first_violation_s is None


def test_protection_trips_on_late_dip():
    v = np.full(201, 0.75)
    v[100:] = 0.65
    tr = _trace(v)
    report = check_protection(tr, {5: ProtectionCurve.from_magnitudes("under_voltage", [(0.0, 0.7), (2.0, 0.7)])})
    (e,) = report.elements
    assert not report.passed
    assert e.first_violation_s == pytest.approx(1.0)
    assert e.min_margin == pytest.approx(-0.05)


def test_protection_staircase_allows_short_dip():
    v = np.full(201, 0.95)
    v[:90] = 0.6
    tr = _trace(v)
    curve = ProtectionCurve.from_magnitudes("under_voltage", [(0.0, 0.5), (1.0, 0.5), (1.01, 0.9), (3.0, 0.9)])
    assert check_protection(tr, {5: curve}).passed


def test_overcurrent_margin():
    current = np.full(201, 1.5)
    current[50:60] = 2.5
    tr = _trace(np.ones(201), current)
    report = check_protection(tr, line_curves={(4, 5): ProtectionCurve.from_magnitudes("over_current", [(0.0, 2.0)])})
    (e,) = report.elements
    assert e.element == "line 4-5"
    assert e.kind == "over_current"
    assert e.first_violation_s == pytest.approx(0.5)
    assert e.min_margin == pytest.approx(-0.5)
