import numpy as np
import pytest

from app.core.config import ModelConfig
from app.core.errors import ModelBuildError
from app.services.artifacts import model_stats_text
from app.services.mip import (
    aux_nodes,
    block_topology,
    build_model,
    build_slip_models,
    bus_weight,
    start_blocks,
    started_motors,
)
from app.services.motor import running_load
from app.services.netmodel import parse_network, parse_scenario
from conftest import chain_network, chain_scenario


def _fixed_torque(data_dir):
    net = parse_network(data_dir / "fixed_torque_replica.json")
    scen = parse_scenario(data_dir / "fixed_torque_scenario.json", ModelConfig())
    return net, scen


def test_aux_node_names():
    assert aux_nodes(20) == ("20:p", "20:s", "20:m")


def test_autotransformer_is_in_until_bypass_speed(data_dir):
    net, _ = _fixed_torque(data_dir)
    motor = net.motor_at(20)
    first = block_topology(net, motor, 1, 1.0)
    assert first.autotransformer is not None
    assert first.motor_node == "20:m"
    assert {"20:p", "20:s", "20:m"} <= set(first.nodes)
    assert [e.kind for e in first.outgoing("20:p")] == ["ratio"]

    bypassed = block_topology(net, motor, 17, 0.2)
    assert bypassed.autotransformer is None
    assert bypassed.motor_node == 20
    assert "20:m" not in bypassed.nodes


def test_started_motors_follow_the_stage_one_plan():
    net = chain_network()
    assert [m.bus for m in started_motors(net, chain_scenario())] == [2]
    assert started_motors(net, chain_scenario(l0={"1": [1, 1], "2": [0, 0]})) == []


def test_missing_slip_model_is_a_build_error():
    net, scen = chain_network(), chain_scenario()
    with pytest.raises(ModelBuildError):
        start_blocks(net, scen, {})


def test_bus_weight_adds_motor_running_power():
    net = chain_network()
    assert bus_weight(net, 1, 0) == pytest.approx(0.3)
    assert bus_weight(net, 2, 0) == pytest.approx(running_load(net.motor_at(2), net.s_base)[0])


def test_fixed_torque_model_structure(data_dir):
    net, scen = _fixed_torque(data_dir)
    slip_models = build_slip_models(net, scen, ModelConfig())
    program, vmap = build_model(net, scen, slip_models, ModelConfig())
    stats = program.stats()
    k_max = slip_models[20].k_max
    active = sum(1 for s in slip_models[20].slips if s > 1.0 - 0.8 + 1e-9)

    # 3 buses x 3 steps of energization plus 3 tap bits for taps -2..2
    assert stats.binaries == 12
    assert stats.constraints["tap_ratio"] == active
    assert stats.constraints["elapsed_time"] == k_max
    assert stats.variables["dt"] == k_max
    # flat under-voltage curve needs no breakpoints
    assert "sos2:protection_pwl" not in stats.constraints
    assert stats.constraints["sos2:pwl"] == k_max
    assert ("dr", 20) in vmap
    assert not program.certificates
    assert set(program.parts) == {"reliability", "operational"}


def test_line_cones_per_block(data_dir):
    net, scen = _fixed_torque(data_dir)
    slip_models = build_slip_models(net, scen, ModelConfig())
    program, _ = build_model(net, scen, slip_models, ModelConfig())
    model = slip_models[20]
    active = sum(1 for s in model.slips if s > 1.0 - 0.8 + 1e-9)
    # three feeder lines everywhere, two autotransformer impedances while it is in
    assert program.stats().constraints["line_cone"] == 3 * model.k_max + 2 * active


def test_dg_cones_share_one_current_split(data_dir):
    net = parse_network(data_dir / "dg_feeder.json")
    scen = parse_scenario(data_dir / "dg_feeder_scenario.json", ModelConfig())
    slip_models = build_slip_models(net, scen, ModelConfig())
    program, vmap = build_model(net, scen, slip_models, ModelConfig())
    stats = program.stats()
    k_max = slip_models[41].k_max
    assert stats.constraints["dg_current_limit"] == 1
    assert stats.constraints["dg_p_cone"] == k_max
    assert stats.constraints["dg_q_cone"] == k_max
    assert program.hi[vmap[("Fp", 42, 41)]] == pytest.approx(0.365 ** 2)
    # staircase under-voltage curve at the motor bus is piecewise linear in elapsed time
    assert stats.constraints["sos2:protection_pwl"] == k_max


def test_stalling_motor_yields_a_certificate():
    net = chain_network(motors=[{
        "bus": 2, "rs": 0.036, "xls": 0.064, "rr": 0.03425, "xlr": 0.064, "xm": 1.40425,
        "h_s": 0.198, "rated_va": 4000, "mech": {"kind": "constant", "t_nom_pu": 2.0},
    }])
    scen = chain_scenario()
    program, _ = build_model(net, scen, build_slip_models(net, scen), ModelConfig())
    assert program.certificates
    assert "stalls at step 1" in program.certificates[0]


def test_one_motor_start_per_step():
    net = chain_network(motors=[
        {"bus": 1, "rs": 0.036, "xls": 0.064, "rr": 0.03425, "xlr": 0.064, "xm": 1.40425,
         "h_s": 0.198, "rated_va": 4000, "mech": {"kind": "linear", "t_nom_pu": 0.05}},
        {"bus": 2, "rs": 0.036, "xls": 0.064, "rr": 0.03425, "xlr": 0.064, "xm": 1.40425,
         "h_s": 0.198, "rated_va": 4000, "mech": {"kind": "linear", "t_nom_pu": 0.05}},
    ])
    scen = chain_scenario(delta_s=0.25)
    program, _ = build_model(net, scen, build_slip_models(net, scen), ModelConfig())
    assert program.stats().constraints["one_motor_start"] == 2


def test_model_stats_carry_equation_tags(data_dir):
    net = parse_network(data_dir / "dg_feeder.json")
    scen = parse_scenario(data_dir / "dg_feeder_scenario.json", ModelConfig())
    program, _ = build_model(net, scen, build_slip_models(net, scen), ModelConfig())
    stats = program.stats()
    c = stats.constraints
    assert stats.tags["voltage_drop"] == "9a"
    assert stats.tags["line_cone"] == "9d"
    assert stats.tags["dg_current_limit"] == "10a"
    assert stats.equations["9a"] == c["voltage_drop"]
    assert stats.equations["9b"] == c["p_balance"]
    assert stats.equations["10a"] == 1
    assert stats.equations["10b"] == c["dg_p_cone"]
    assert stats.equations["12a"] == c["torque_margin"]
    assert stats.equations["16"] == c["sos2:pwl"] + c["sos2:protection_pwl"]
    # untagged families such as ampacity are still listed by name
    assert "ampacity" in c and "ampacity" not in stats.tags
    keys = list(stats.equations)
    assert keys.index("9a") < keys.index("10a") < keys.index("12a")

    text = model_stats_text(stats)
    assert "by equation:" in text
    assert any(line.split() == ["voltage_drop", "9a", str(c["voltage_drop"])] for line in text.splitlines())


def test_step_time_breakpoints_are_log_spaced(data_dir):
    net, scen = _fixed_torque(data_dir)
    config = ModelConfig()
    program, _ = build_model(net, scen, build_slip_models(net, scen, config), config)
    sets = [s for s in program.sos2 if s.family == "pwl"]
    assert sets
    for s in sets:
        assert len(s.xs) == config.pwl_breakpoints
        ratios = s.xs[1:] / s.xs[:-1]
        assert ratios == pytest.approx(np.full(len(ratios), ratios[0]), rel=1e-9)
        assert ratios[0] > 1.0
