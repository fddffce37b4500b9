import numpy as np
import pytest

from app.core.config import ModelConfig, SimConfig, SolverConfig
from app.services.mip import build_model, build_slip_models, check_exactness
from app.services.program import ModelSolution
from app.services.simulate import validate_plan_with_traces
from app.services.solve import branch_and_bound, extract_plan
from conftest import chain_network, chain_scenario, motor_dict, solve_case

VERDICTS = {"exact", "exactness not guaranteed", "exactness unverified"}


def test_fixed_torque_start_through_autotransformer_keeps_every_load(fixed_torque_run):
    plan = fixed_torque_run["plan"]
    model = fixed_torque_run["slip_models"][20]
    assert plan is not None
    assert plan.proven_optimal
    assert plan.objective.reliability == pytest.approx(0.0, abs=1e-6)
    assert all(not r.shifted_steps for r in plan.loads)

    m = plan.motor(20)
    assert m.start_step == 0
    assert m.start_label == "00:00"
    assert m.tap in (-2, -1)
    assert len(m.tap_bits) == 3
    assert len(m.steps) == model.k_max
    assert m.steps[0].slip == 1.0
    assert np.all(np.diff([s.t_s for s in m.steps]) > 0)
    assert m.predicted_time_s == pytest.approx(m.steps[-1].t_s)
    # flat 0.9682 p.u. relay setting at the motor bus
    assert min(m.bus_u["20"]) >= 0.9682 ** 2 - 1e-6


def test_direct_start_sheds_the_large_load(fixed_torque_run, fixed_torque_no_at_run):
    plan = fixed_torque_no_at_run["plan"]
    assert plan is not None
    assert plan.objective.reliability == pytest.approx(1.0, abs=1e-4)
    assert plan.row(24).shifted_steps == [0]
    assert plan.row(10).shifted_steps == []
    assert plan.motor(20).start_step == 0
    assert plan.motor(20).tap is None
    assert fixed_torque_run["plan"].objective.total < plan.objective.total


def test_dg_feeder_dg_current_split(dg_feeder_run):
    plan = dg_feeder_run["plan"]
    assert plan is not None
    assert plan.objective.reliability == pytest.approx(0.0, abs=1e-6)
    m = plan.motor(41)
    assert m.start_label == "17:00"
    assert min(m.bus_u["41"]) >= 0.8 ** 2 - 1e-6

    (ref,) = plan.dg_references
    assert ref.bus == 42 and ref.motor_bus == 41
    assert ref.fp_a2 + ref.fq_a2 == pytest.approx(13.3225, abs=1e-5)
    assert ref.fp_pu2 + ref.fq_pu2 == pytest.approx(0.365 ** 2, abs=1e-7)
    assert ref.ip_a ** 2 == pytest.approx(ref.fp_a2, rel=1e-9)


def test_exactness_report_is_consistent(dg_feeder_run):
    plan = dg_feeder_run["plan"]
    incumbent = dg_feeder_run["incumbent"]
    assert plan.exactness in VERDICTS
    assert incumbent.exactness.verdict == plan.exactness
    report = check_exactness(dg_feeder_run["net"], ModelSolution.of(dg_feeder_run["program"], incumbent.x, incumbent.objective))
    assert report.verdict == plan.exactness
    assert report.condition_objective.passed
    assert report.condition_voltage.passed
    assert "42@41" in report.fp_fq_residual
    assert report.fp_fq_residual["42@41"] < 1e-6


def test_fixed_torque_plan_replays(fixed_torque_run):
    run = fixed_torque_run
    report, traces = validate_plan_with_traces(run["net"], run["plan"], run["slip_models"], SimConfig())
    (motor,) = report.motors
    assert motor.bus == 20
    assert len(motor.steps) == run["slip_models"][20].k_max
    assert len(report.snapshots) == 3

    trace = traces[20]
    assert trace.completed and not trace.stalled
    assert any(what == "autotransformer bypassed" for _, what in trace.events)
    assert trace.slip[0] == 1.0
    assert trace.slip[-1] < 0.2

    assert report.passed
    assert motor.max_deviation <= 0.02
    assert abs(motor.accel_ratio - 1.0) <= 0.1
    assert motor.accel_time_sim_s == pytest.approx(motor.accel_time_model_s, rel=0.1)
    assert motor.protection.passed


def test_dg_feeder_plan_replays(dg_feeder_run):
    run = dg_feeder_run
    report, traces = validate_plan_with_traces(run["net"], run["plan"], run["slip_models"], SimConfig())
    (motor,) = report.motors
    assert motor.bus == 41
    assert not motor.stalled
    assert report.passed
    assert motor.max_deviation <= 0.02
    assert abs(motor.accel_ratio - 1.0) <= 0.1
    assert motor.protection.passed
    assert {e.kind for e in motor.protection.elements} == {"under_voltage", "over_current"}
    assert traces[41].completed


def test_variable_order_does_not_change_the_optimum(fixed_torque_no_at_run):
    program = fixed_torque_no_at_run["program"]
    config = SolverConfig(rel_gap=1e-9, abs_gap=1e-9)
    base, _ = branch_and_bound(program, config)
    shuffled = program.permuted(np.random.default_rng(3).permutation(program.n_vars))
    incumbent, stats = branch_and_bound(shuffled, config)
    assert stats.status == "OPTIMAL"
    assert incumbent.objective == pytest.approx(base.objective, abs=1e-6)
    for sym, idx in program.vmap.items("L"):
        assert round(incumbent.x[shuffled.vmap[sym]]) == round(base.x[idx])


def test_halving_the_loss_price_keeps_the_schedule(fixed_torque_no_at_run):
    half = solve_case("fixed_torque_no_at.json", "fixed_torque_scenario.json", ModelConfig(w_op=ModelConfig().w_op / 2))
    assert half["scenario"].w_op == pytest.approx(ModelConfig().w_op / 2)
    before = fixed_torque_no_at_run["plan"]
    after = half["plan"]
    assert {r.bus: r.l for r in after.loads} == {r.bus: r.l for r in before.loads}
    assert after.motor(20).start_step == before.motor(20).start_step
    assert after.objective.reliability == pytest.approx(before.objective.reliability, abs=1e-6)


def test_two_motors_due_together_start_at_different_steps():
    net = chain_network(motors=[motor_dict(1), motor_dict(2)])
    scen = chain_scenario(delta_s=0.25)
    slip_models = build_slip_models(net, scen, ModelConfig())
    program, _ = build_model(net, scen, slip_models, ModelConfig())
    incumbent, stats = branch_and_bound(program, SolverConfig())
    assert stats.status == "OPTIMAL"
    plan = extract_plan(incumbent, program, net, scen, slip_models, stats)
    assert sorted(plan.motor(b).start_step for b in (1, 2)) == [0, 1]
    # bus 1 also carries the static load, so the cheaper shift is bus 2
    assert plan.motor(2).start_step == 1
    assert plan.row(2).shifted_steps == [0]
    assert plan.objective.reliability > 0
