# app/services/artifacts.py
"""Run directory bookkeeping: atomic writes, content hashes, manifest and report tables."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from pydantic import BaseModel

from app import __version__
from app.core.errors import ManifestMismatchError
from app.schemas.plan import RestorationPlan
from app.schemas.reports import ComparisonReport, FileEntry, ModelStats, RunManifest

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


# ----------------------- #
# Files
# ----------------------- #
def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: str | Path, obj: Any) -> Path:
    if isinstance(obj, BaseModel):
        text = obj.model_dump_json(indent=2)
    else:
        text = json.dumps(obj, indent=2, sort_keys=True)
    return atomic_write_text(path, text + "\n")


def write_frame(path: str | Path, df: pd.DataFrame) -> Path:
    return atomic_write_text(path, df.to_csv(index=False, float_format="%.10g", lineterminator="\n"))


def read_plan(path: str | Path) -> RestorationPlan:
    with open(path, "r", encoding="utf-8") as f:
        return RestorationPlan.model_validate_json(f.read())


# ----------------------- #
# Manifest
# ----------------------- #
def file_entries(files: Dict[str, str | Path], root: Optional[Path] = None) -> List[FileEntry]:
    out = []
    for role, p in files.items():
        p = Path(p)
        shown = p.relative_to(root) if root is not None and p.is_relative_to(root) else p
        out.append(FileEntry(role=role, path=str(shown), sha256=sha256_file(p)))
    return out


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    return write_json(out_dir / MANIFEST, manifest)


def read_manifest(out_dir: str | Path) -> RunManifest:
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        raise ManifestMismatchError(f"{path} not found; not a run directory")
    with open(path, "r", encoding="utf-8") as f:
        return RunManifest.model_validate_json(f.read())


def new_manifest(inputs: Dict[str, str | Path], config: Dict[str, Any]) -> RunManifest:
    return RunManifest(tool_version=__version__, inputs=file_entries({k: Path(p).resolve() for k, p in inputs.items()}), config=config)


def entry(manifest: RunManifest, role: str, outputs: bool = False) -> FileEntry:
    for e in (manifest.outputs if outputs else manifest.inputs):
        if e.role == role:
            return e
    raise ManifestMismatchError(f"manifest has no {'output' if outputs else 'input'} with role {role!r}")


def verify_entry(e: FileEntry, path: Optional[str | Path] = None, root: Optional[Path] = None) -> Path:
    """Recompute the hash of a recorded file; a changed or missing file is a mismatch."""
    p = Path(path) if path is not None else Path(e.path)
    if path is None and root is not None and not p.is_absolute():
        p = root / p
    if not p.exists():
        raise ManifestMismatchError(f"{e.role}: {p} is missing")
    digest = sha256_file(p)
    if digest != e.sha256:
        raise ManifestMismatchError(f"{e.role}: {p} changed since the run (sha256 {digest[:12]} != {e.sha256[:12]})")
    return p


# ----------------------- #
# Report tables
# ----------------------- #
def energization_table(plan: RestorationPlan) -> pd.DataFrame:
    rows = []
    for r in plan.loads:
        row: Dict[str, Any] = {"bus": r.bus, "kind": r.kind}
        for t, label in enumerate(plan.labels):
            row[label] = "shifted" if t in r.shifted_steps else str(r.l[t])
        rows.append(row)
    return pd.DataFrame(rows, columns=["bus", "kind", *plan.labels])


def motor_steps_table(plan: RestorationPlan) -> pd.DataFrame:
    rows = [
        {
            "bus": m.bus,
            "start": m.start_label,
            "tap": m.tap,
            "k": st.k,
            "slip": st.slip,
            "u_motor": st.u_motor,
            "t_ele_pu": st.t_ele_pu,
            "dt_s": st.dt_s,
            "t_s": st.t_s,
        }
        for m in plan.motors
        for st in m.steps
    ]
    return pd.DataFrame(rows, columns=["bus", "start", "tap", "k", "slip", "u_motor", "t_ele_pu", "dt_s", "t_s"])


def summary_text(plan: RestorationPlan, comparison: Optional[ComparisonReport] = None) -> str:
    o = plan.objective
    lines = [
        f"network: {plan.network or '-'}",
        f"scenario: {plan.scenario or '-'}",
        f"objective: {o.total:.6f} (reliability {o.reliability:.6f} x {o.w_re:g}, operational {o.operational:.6g} x {o.w_op:g})",
        f"proven optimal: {'yes' if plan.proven_optimal else 'no'} (gap {plan.gap:.3g}, {plan.nodes} nodes)",
        f"exactness: {plan.exactness}",
        "",
    ]
    shifted = [(r.bus, [plan.labels[t] for t in r.shifted_steps]) for r in plan.loads if r.shifted_steps]
    if shifted:
        lines.append("shifted loads:")
        lines += [f"  bus {b}: {', '.join(labels)}" for b, labels in shifted]
    else:
        lines.append("shifted loads: none")
    for m in plan.motors:
        tap = "-" if m.tap is None else f"{m.tap} ({m.tap_bits})"
        lines.append(f"motor at {m.bus}: start {m.start_label or '-'}, tap {tap}, predicted acceleration {m.predicted_time_s:.3f} s")
    for d in plan.dg_references:
        lines.append(f"dg at {d.bus} (motor {d.motor_bus}): Ip {d.ip_a:.4f} A, Iq {d.iq_a:.4f} A")
    if comparison is not None:
        lines += ["", f"validation: {'pass' if comparison.passed else 'FAIL'}"]
        for m in comparison.motors:
            lines.append(f"  motor at {m.bus}: max |dU| {m.max_deviation:.4f}, failures {', '.join(m.failures) or 'none'}")
    return "\n".join(lines) + "\n"


def model_stats_text(stats: ModelStats) -> str:
    lines = [
        f"binaries: {stats.binaries}",
        f"continuous: {stats.continuous}",
        f"cones: {stats.cones}",
        f"sos2 sets: {stats.sos2_sets}",
        "",
        "variables:",
    ]
    lines += [f"  {k:<28}{v:>8}" for k, v in sorted(stats.variables.items())]
    lines += ["", "constraints:"]
    lines += [f"  {k:<28}{stats.tags.get(k, '-'):>8}{v:>8}" for k, v in sorted(stats.constraints.items())]
    lines += ["", "by equation:"]
    lines += [f"  {k:<28}{v:>8}" for k, v in stats.equations.items()]
    return "\n".join(lines) + "\n"


def write_report(out_dir: Path, plan: RestorationPlan, comparison: Optional[ComparisonReport] = None) -> Dict[str, Path]:
    return {
        "summary": atomic_write_text(out_dir / "summary.txt", summary_text(plan, comparison)),
        "energization": write_frame(out_dir / "energization.csv", energization_table(plan)),
        "motor_steps": write_frame(out_dir / "motor_steps.csv", motor_steps_table(plan)),
    }
