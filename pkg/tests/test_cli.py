import hashlib
import json
import shutil

import pandas as pd
import pytest

from app.cli import EXIT_INFEASIBLE, main
from app.core.errors import ManifestMismatchError
from app.schemas.plan import LoadRow
from app.schemas.reports import ComparisonReport
from app.services.artifacts import (
    atomic_write_text,
    energization_table,
    entry,
    new_manifest,
    read_manifest,
    sha256_file,
    verify_entry,
)
from conftest import bare_plan, radial_dict, two_step_scenario


def test_sha256_matches_hashlib(tmp_path):
    p = atomic_write_text(tmp_path / "sub" / "a.txt", "abc\n")
    assert sha256_file(p) == hashlib.sha256(b"abc\n").hexdigest()
    assert [f.name for f in p.parent.iterdir()] == ["a.txt"]


def test_changed_input_is_a_manifest_mismatch(tmp_path):
    src = tmp_path / "network.json"
    src.write_text("{}", encoding="utf-8")
    manifest = new_manifest({"network": src}, {})
    e = entry(manifest, "network")
    assert verify_entry(e) == src.resolve()
    src.write_text("{ }", encoding="utf-8")
    with pytest.raises(ManifestMismatchError):
        verify_entry(e)
    with pytest.raises(ManifestMismatchError):
        entry(manifest, "scenario")


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestMismatchError):
        read_manifest(tmp_path)
    with pytest.raises(SystemExit) as err:
        main(["check", "--out", str(tmp_path)])
    assert str(err.value.code).startswith("error:")


def test_energization_table_marks_shifted_steps():
    plan = bare_plan([(1, "static")], labels=("08:00", "09:00"))
    plan.loads.append(LoadRow(bus=2, kind="static", l0=[1, 1], l=[0, 1], shifted_steps=[0]))
    table = energization_table(plan)
    assert list(table.columns) == ["bus", "kind", "08:00", "09:00"]
    assert table.iloc[1]["08:00"] == "shifted"
    assert table.iloc[1]["09:00"] == "1"


def test_bad_network_exits_with_one_line(tmp_path):
    d = radial_dict()
    d["lines"].append({"from": 0, "to": 2, "r_pu": 0.001, "x_pu": 0.001})
    net = tmp_path / "net.json"
    net.write_text(json.dumps(d), encoding="utf-8")
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps(two_step_scenario()), encoding="utf-8")
    with pytest.raises(SystemExit) as err:
        main(["solve", "--network", str(net), "--scenario", str(scen), "--out", str(tmp_path / "run")])
    msg = str(err.value.code)
    assert msg.startswith("error:") and "\n" not in msg


def test_unstartable_motor_exits_infeasible(tmp_path):
    d = radial_dict()
    d["motors"][0]["mech"] = {"kind": "constant", "t_nom_pu": 2.0}
    net = tmp_path / "net.json"
    net.write_text(json.dumps(d), encoding="utf-8")
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps(two_step_scenario()), encoding="utf-8")
    out = tmp_path / "run"
    assert main(["solve", "--network", str(net), "--scenario", str(scen), "--out", str(out), "--seed", "7"]) == EXIT_INFEASIBLE
    manifest = read_manifest(out)
    assert manifest.status == "INFEASIBLE"
    assert manifest.exit_code == EXIT_INFEASIBLE
    assert manifest.config["solver"]["seed"] == 7
    assert "stalls" in (out / "certificates.txt").read_text(encoding="utf-8")
    assert not (out / "plan.json").exists()


def test_solve_check_report_round(tmp_path, data_dir):
    network = shutil.copy(data_dir / "fixed_torque_replica.json", tmp_path / "network.json")
    scenario = shutil.copy(data_dir / "fixed_torque_scenario.json", tmp_path / "scenario.json")
    out = tmp_path / "run"
    code = main(["solve", "--network", str(network), "--scenario", str(scenario), "--out", str(out), "--validate"])
    assert code == 0
    for name in ("plan.json", "exactness.json", "solution.csv", "search_log.csv", "model_stats.json",
                 "model_stats.txt", "comparison.json", "trace_motor_20.csv", "summary.txt", "energization.csv",
                 "motor_steps.csv", "manifest.json"):
        assert (out / name).exists(), name
    manifest = read_manifest(out)
    assert manifest.exit_code == code
    assert {e.role for e in manifest.inputs} == {"network", "scenario"}
    roles = {e.role for e in manifest.outputs}
    assert {"plan", "solution", "comparison", "trace_20", "summary"} <= roles

    comparison = ComparisonReport.model_validate_json((out / "comparison.json").read_text(encoding="utf-8"))
    assert comparison.passed
    (motor,) = comparison.motors
    assert motor.max_deviation <= 0.02
    assert abs(motor.accel_ratio - 1.0) <= 0.1
    assert motor.protection.passed

    trace = pd.read_csv(out / "trace_motor_20.csv")
    assert set(trace["bus"]) == {0, 10, 20, 24}

    assert main(["check", "--out", str(out)]) in (0, 2)
    assert (out / "exactness_check.json").exists()
    assert main(["report", "--out", str(out)]) == 0
    assert "shifted loads: none" in (out / "summary.txt").read_text(encoding="utf-8")

    # edited plan no longer matches its recorded hash
    plan = json.loads((out / "plan.json").read_text(encoding="utf-8"))
    plan["nodes"] += 1
    (out / "plan.json").write_text(json.dumps(plan), encoding="utf-8")
    with pytest.raises(SystemExit):
        main(["report", "--out", str(out)])


def test_repeated_solves_write_identical_plans(tmp_path, data_dir):
    network = shutil.copy(data_dir / "fixed_torque_no_at.json", tmp_path / "network.json")
    scenario = shutil.copy(data_dir / "fixed_torque_scenario.json", tmp_path / "scenario.json")
    plans = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["solve", "--network", str(network), "--scenario", str(scenario), "--out", str(out)]) == 0
        plans.append((out / "plan.json").read_bytes())
    assert plans[0] == plans[1]
