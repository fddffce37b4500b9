# app/cli.py
"""Reproducible restoration runs.

    python -m app.cli solve --network N.json --scenario S.json --out runs/x [--validate]
    python -m app.cli simulate --out runs/x [--plan other_plan.json]
    python -m app.cli check --out runs/x
    python -m app.cli report --out runs/x

Exit status: 0 proven optimal (and validated when asked), 1 bad input or
manifest mismatch, 2 incumbent without optimality proof, 3 infeasible,
4 validation or protection failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
from pydantic import ValidationError

from app.core.config import Settings, load_settings
from app.core.errors import ManifestMismatchError, RestorationError, SchemaError, StallError
from app.core.logging import configure_logging, verbosity_to_level
from app.schemas.reports import ComparisonReport, RunManifest
from app.services.artifacts import (
    atomic_write_text,
    entry,
    file_entries,
    model_stats_text,
    new_manifest,
    read_manifest,
    read_plan,
    verify_entry,
    write_frame,
    write_json,
    write_manifest,
    write_report,
)
from app.services.mip import build_model, build_slip_models, check_exactness
from app.services.netmodel import (
    Network,
    Scenario,
    parse_network,
    parse_scenario,
    scenario_network,
    validate_network,
    validate_scenario,
)
from app.services.program import ModelSolution
from app.services.simulate import SimTrace, validate_plan_with_traces
from app.services.solve import branch_and_bound, extract_plan

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_PROVEN = 2
EXIT_INFEASIBLE = 3
EXIT_VALIDATION = 4


# ----------------------- #
# Helpers
# ----------------------- #
def load_inputs(network: str | Path, scenario: str | Path, settings: Settings) -> Tuple[Network, Scenario]:
    net = parse_network(network)
    report = validate_network(net)
    if not report.ok:
        raise SchemaError(f"{network}: " + "; ".join(v.message for v in report.violations))
    scen = parse_scenario(scenario, settings.model)
    report = validate_scenario(scen, net)
    if not report.ok:
        raise SchemaError(f"{scenario}: " + "; ".join(v.message for v in report.violations))
    return scenario_network(net, scen), scen


def _record(out: Path, manifest: RunManifest, files: Dict[str, Path]) -> None:
    fresh = {e.role: e for e in file_entries(files, out)}
    manifest.outputs = [e for e in manifest.outputs if e.role not in fresh] + list(fresh.values())


def _write_traces(out: Path, traces: Dict[int, SimTrace], every: int) -> Dict[str, Path]:
    return {f"trace_{bus}": write_frame(out / f"trace_motor_{bus}.csv", tr.to_frame(every)) for bus, tr in sorted(traces.items())}


def _print_trips(report: ComparisonReport) -> None:
    for m in report.motors:
        for e in m.protection.elements:
            if not e.passed:
                print(f"trip: motor at {m.bus}, {e.element} ({e.kind}) at {e.first_violation_s:.3f} s, "
                      f"margin {e.min_margin:.4f} p.u.", file=sys.stderr)


# ----------------------- #
# Subcommands
# ----------------------- #
def run_scenario(network: str | Path, scenario: str | Path, out: str | Path, config: Optional[str | Path] = None,
                 validate: bool = False, seed: Optional[int] = None, time_limit_s: Optional[float] = None,
                 gap: Optional[float] = None) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    settings = load_settings(config, **{"solver.seed": seed, "solver.time_limit_s": time_limit_s, "solver.rel_gap": gap})
    inputs = {"network": network, "scenario": scenario}
    if config is not None:
        inputs["config"] = config
    manifest = new_manifest(inputs, settings.model_dump(mode="json"))
    timings: Dict[str, float] = {}
    files: Dict[str, Path] = {}

    t0 = time.perf_counter()
    net, scen = load_inputs(network, scenario, settings)
    try:
        slip_models = build_slip_models(net, scen, settings.model)
    except StallError as exc:
        return _finish(out, manifest, files, timings, "INFEASIBLE", EXIT_INFEASIBLE, [str(exc)])
    program, _ = build_model(net, scen, slip_models, settings.model)
    stats = program.stats()
    files["model_stats"] = write_json(out / "model_stats.json", stats)
    files["model_stats_txt"] = atomic_write_text(out / "model_stats.txt", model_stats_text(stats))
    timings["build"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    incumbent, search = branch_and_bound(program, settings.solver)
    timings["solve"] = time.perf_counter() - t0
    files["search_log"] = write_frame(out / "search_log.csv", search.to_frame())
    if incumbent is None:
        code = EXIT_INFEASIBLE if search.status == "INFEASIBLE" else EXIT_NOT_PROVEN
        return _finish(out, manifest, files, timings, search.status, code, search.certificates)

    plan = extract_plan(incumbent, program, net, scen, slip_models, search)
    files["plan"] = write_json(out / "plan.json", plan)
    files["exactness"] = write_json(out / "exactness.json", incumbent.exactness)
    files["solution"] = write_frame(out / "solution.csv", pd.DataFrame({"symbol": program.names, "value": incumbent.x}))
    code = EXIT_OK if plan.proven_optimal else EXIT_NOT_PROVEN

    comparison = None
    if validate:
        t0 = time.perf_counter()
        comparison, traces = validate_plan_with_traces(net, plan, slip_models, settings.simulate)
        timings["validate"] = time.perf_counter() - t0
        files["comparison"] = write_json(out / "comparison.json", comparison)
        files.update(_write_traces(out, traces, settings.simulate.trace_every))
        if not comparison.passed:
            _print_trips(comparison)
            code = EXIT_VALIDATION
    files.update(write_report(out, plan, comparison))
    return _finish(out, manifest, files, timings, search.status, code)


def _finish(out: Path, manifest: RunManifest, files: Dict[str, Path], timings: Dict[str, float],
            status: str, code: int, certificates: Optional[List[str]] = None) -> int:
    if certificates:
        files["certificates"] = atomic_write_text(out / "certificates.txt", "\n".join(certificates) + "\n")
        print(f"infeasible: {certificates[0]}", file=sys.stderr)
    _record(out, manifest, files)
    manifest.timings_s = {k: round(v, 6) for k, v in timings.items()}
    manifest.status = status
    manifest.exit_code = code
    write_manifest(out, manifest)
    logger.info("run finished with %s (exit %d)", status, code)
    return code


def run_simulate(out: str | Path, plan_path: Optional[str | Path] = None, network: Optional[str | Path] = None,
                 scenario: Optional[str | Path] = None, config: Optional[str | Path] = None) -> int:
    out = Path(out)
    manifest = read_manifest(out) if network is None or scenario is None else None
    if manifest is not None:
        network = verify_entry(entry(manifest, "network"))
        scenario = verify_entry(entry(manifest, "scenario"))
        settings = Settings(**manifest.config) if config is None else load_settings(config)
    else:
        out.mkdir(parents=True, exist_ok=True)
        manifest = new_manifest({"network": network, "scenario": scenario}, {})
        settings = load_settings(config)
        manifest.config = settings.model_dump(mode="json")
    net, scen = load_inputs(network, scenario, settings)
    plan = read_plan(plan_path if plan_path is not None else out / "plan.json")
    slip_models = build_slip_models(net, scen, settings.model)

    comparison, traces = validate_plan_with_traces(net, plan, slip_models, settings.simulate)
    files = {"comparison": write_json(out / "comparison.json", comparison)}
    files.update(_write_traces(out, traces, settings.simulate.trace_every))
    _record(out, manifest, files)
    write_manifest(out, manifest)
    if not comparison.passed:
        _print_trips(comparison)
        return EXIT_VALIDATION
    return EXIT_OK


def run_check(out: str | Path) -> int:
    """Exactness audit of a stored solution against the model rebuilt from the recorded inputs."""
    out = Path(out)
    manifest = read_manifest(out)
    network = verify_entry(entry(manifest, "network"))
    scenario = verify_entry(entry(manifest, "scenario"))
    plan = read_plan(verify_entry(entry(manifest, "plan", outputs=True), root=out))
    solution_path = verify_entry(entry(manifest, "solution", outputs=True), root=out)
    settings = Settings(**manifest.config)

    net, scen = load_inputs(network, scenario, settings)
    program, _ = build_model(net, scen, build_slip_models(net, scen, settings.model), settings.model)
    stored = pd.read_csv(solution_path)
    if list(stored["symbol"]) != program.names:
        raise ManifestMismatchError(f"{solution_path} does not belong to the model built from the recorded inputs")
    report = check_exactness(net, ModelSolution.of(program, stored["value"].to_numpy(dtype=float), plan.objective.total))

    _record(out, manifest, {"exactness_check": write_json(out / "exactness_check.json", report)})
    write_manifest(out, manifest)
    print(f"{report.verdict} (max line residual {report.max_line_residual:.3g}, max dg residual {report.max_dg_residual:.3g})")
    return EXIT_OK if report.verdict == "exact" else EXIT_NOT_PROVEN


def run_report(out: str | Path) -> int:
    out = Path(out)
    manifest = read_manifest(out)
    plan = read_plan(verify_entry(entry(manifest, "plan", outputs=True), root=out))
    comparison = None
    if (out / "comparison.json").exists():
        comparison = ComparisonReport.model_validate_json((out / "comparison.json").read_text(encoding="utf-8"))
    _record(out, manifest, write_report(out, plan, comparison))
    write_manifest(out, manifest)
    return EXIT_OK


# ----------------------- #
# Entry point
# ----------------------- #
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="python -m app.cli", description="Load restoration with motor starting")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="optimize a restoration plan")
    s.add_argument("--network", required=True)
    s.add_argument("--scenario", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--validate", action="store_true", help="replay the plan in the time-domain simulator")
    s.add_argument("--seed", type=int,
                   help="recorded in the manifest; the search itself is deterministic and draws no random numbers")
    s.add_argument("--time-limit-s", type=float)
    s.add_argument("--gap", type=float, help="relative optimality gap")

    sim = sub.add_parser("simulate", help="replay an existing plan")
    sim.add_argument("--out", required=True)
    sim.add_argument("--plan", help="plan file, default <out>/plan.json")
    sim.add_argument("--network", help="default: the network recorded in the run manifest")
    sim.add_argument("--scenario")
    sim.add_argument("--config")

    c = sub.add_parser("check", help="exactness audit of a stored run")
    c.add_argument("--out", required=True)

    r = sub.add_parser("report", help="regenerate summary and plot-ready tables")
    r.add_argument("--out", required=True)
    return ap


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(verbosity_to_level(args.verbose))
    try:
        if args.command == "solve":
            return run_scenario(args.network, args.scenario, args.out, args.config, args.validate,
                                args.seed, args.time_limit_s, args.gap)
        if args.command == "simulate":
            return run_simulate(args.out, args.plan, args.network, args.scenario, args.config)
        if args.command == "check":
            return run_check(args.out)
        return run_report(args.out)
    except (OSError, RestorationError, ValidationError) as exc:
        raise SystemExit(f"error: {_one_line(exc)}")


if __name__ == "__main__":
    raise SystemExit(main())
