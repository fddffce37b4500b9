import copy
from pathlib import Path
from typing import Optional

import pytest

from app.core.config import ModelConfig, SolverConfig
from app.schemas.plan import LoadRow, MotorStart, ObjectiveBreakdown, RestorationPlan
from app.services.mip import build_model, build_slip_models
from app.services.netmodel import load_network, load_scenario, parse_network, parse_scenario
from app.services.solve import branch_and_bound, extract_plan

DATA = Path(__file__).resolve().parents[1] / "app" / "data"

# 4 kW laboratory machine, 400 V / 4000 VA base (Z_base = 40 ohm)
MOTOR_PU = {"rs": 0.036, "xls": 0.064, "rr": 0.03425, "xlr": 0.064, "xm": 1.40425}


@pytest.fixture
def data_dir() -> Path:
    return DATA


def motor_dict(bus: int, mech=None, **extra) -> dict:
    m = {"bus": bus, **MOTOR_PU, "h_s": 0.198, "rated_va": 4000,
         "mech": mech or {"kind": "linear", "t_nom_pu": 0.0864}}
    m.update(extra)
    return m


def radial_dict(**extra) -> dict:
    """Slack 0 feeding bus 1 (static load) and bus 2 (motor) in a chain."""
    d = {
        "name": "chain",
        "base": {"power_va": 4000, "voltage_v": 400},
        "buses": [{"id": 0, "slack": True}, {"id": 1}, {"id": 2}],
        "lines": [
            {"from": 0, "to": 1, "r_pu": 0.002, "x_pu": 0.004},
            {"from": 1, "to": 2, "r_pu": 0.001, "x_pu": 0.002},
        ],
        "static_loads": [{"bus": 1, "p0_profile": [0.3, 0.3], "q0_profile": [0.1, 0.1]}],
        "motors": [motor_dict(2)],
    }
    d.update(extra)
    return d


@pytest.fixture
def chain_dict() -> dict:
    return copy.deepcopy(radial_dict())


def two_step_scenario(**extra) -> dict:
    d = {"name": "two_steps", "horizon": {"start": "08:00", "end": "10:00", "step_minutes": 60},
         "l0": {"1": [1, 1], "2": [1, 1]}}
    d.update(extra)
    return d


def bare_plan(bus_rows, motor_bus=None, start_step=0, tap=None, labels=("00:00",)) -> RestorationPlan:
    """Plan stub with every listed bus energized over the whole horizon."""
    n = len(labels)
    loads = [LoadRow(bus=b, kind=kind, l0=[1] * n, l=[1] * n, shifted_steps=[]) for b, kind in bus_rows]
    motors = []
    if motor_bus is not None:
        motors.append(MotorStart(bus=motor_bus, start_step=start_step, start_label=labels[start_step],
                                 tap=tap, predicted_time_s=0.0, steps=[], bus_u={}))
    return RestorationPlan(
        step_minutes=60,
        labels=list(labels),
        loads=loads,
        motors=motors,
        dg_references=[],
        objective=ObjectiveBreakdown(total=0.0, reliability=0.0, operational=0.0, w_re=1.0, w_op=1e-4),
        proven_optimal=True,
        gap=0.0,
        nodes=1,
    )


def chain_network(**extra):
    return load_network(radial_dict(**extra))


def chain_scenario(**extra):
    return load_scenario(two_step_scenario(**extra), ModelConfig())


def solve_case(network: str, scenario: str, model_config: Optional[ModelConfig] = None,
               solver_config: Optional[SolverConfig] = None) -> dict:
    model_config = model_config or ModelConfig()
    net = parse_network(DATA / network)
    scen = parse_scenario(DATA / scenario, model_config)
    slip_models = build_slip_models(net, scen, model_config)
    program, vmap = build_model(net, scen, slip_models, model_config)
    incumbent, stats = branch_and_bound(program, solver_config or SolverConfig())
    plan = extract_plan(incumbent, program, net, scen, slip_models, stats) if incumbent is not None else None
    return {"net": net, "scenario": scen, "slip_models": slip_models, "program": program,
            "incumbent": incumbent, "stats": stats, "plan": plan}


@pytest.fixture(scope="session")
def fixed_torque_run() -> dict:
    return solve_case("fixed_torque_replica.json", "fixed_torque_scenario.json")


@pytest.fixture(scope="session")
def fixed_torque_no_at_run() -> dict:
    return solve_case("fixed_torque_no_at.json", "fixed_torque_scenario.json")


@pytest.fixture(scope="session")
def dg_feeder_run() -> dict:
    return solve_case("dg_feeder.json", "dg_feeder_scenario.json")
