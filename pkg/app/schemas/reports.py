from pydantic import BaseModel, computed_field
from typing import Optional, List, Dict, Any, Literal


class Violation(BaseModel):
    code: str
    message: str


class ValidationReport(BaseModel):
    violations: List[Violation] = []

    @computed_field
    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> List[str]:
        return [v.code for v in self.violations]


class ModelStats(BaseModel):
    variables: Dict[str, int]
    constraints: Dict[str, int]
    equations: Dict[str, int] = {}  # counts keyed by formulation reference, e.g. "9a"
    tags: Dict[str, str] = {}  # constraint family -> formulation reference
    binaries: int
    continuous: int
    cones: int
    sos2_sets: int


# ----------------------- #
# Exactness audit
# ----------------------- #
class ConditionCheck(BaseModel):
    passed: bool
    margin: Optional[float] = None  # smallest slack, None when nothing to check
    binding: List[str] = []


class ExactnessReport(BaseModel):
    max_line_residual: float
    max_dg_residual: float
    line_residuals: Dict[str, float]  # "i->j@m" -> worst step
    dg_residuals: Dict[str, float]  # "dg@m:p" / "dg@m:q"
    fp_fq_residual: Dict[str, float]  # |Fp + Fq - f_max^2| per (dg, motor)
    tap_gaps: Dict[str, float]  # linearized vs exact ratio on the secondary
    condition_voltage: ConditionCheck  # v_max slack at DG buses
    condition_ampacity: ConditionCheck  # line current slack
    condition_objective: ConditionCheck  # losses priced in the objective
    residual_ok: bool
    verdict: Literal["exact", "exactness not guaranteed", "exactness unverified"]


# ----------------------- #
# Protection / validation
# ----------------------- #
class ElementTrip(BaseModel):
    element: str
    kind: Literal["under_voltage", "over_current"]
    passed: bool
    min_margin: float  # p.u. magnitude, negative on violation
    first_violation_s: Optional[float] = None


class TripReport(BaseModel):
    elements: List[ElementTrip] = []

    @computed_field
    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.elements)


class StepComparison(BaseModel):
    k: int
    slip: float
    t_model_s: float
    t_sim_s: Optional[float]
    early: bool
    deviations: Dict[str, float]  # node -> |U_sim - U_model|


class MotorComparison(BaseModel):
    bus: int
    stalled: bool
    steps: List[StepComparison]
    max_deviation: float
    max_deviation_early: float
    accel_time_model_s: float
    accel_time_predicted_s: Optional[float]
    accel_time_sim_s: Optional[float]
    accel_ratio: Optional[float]
    protection: TripReport
    failures: List[str] = []

    @computed_field
    @property
    def passed(self) -> bool:
        return not self.failures


class SnapshotRow(BaseModel):
    step: int
    label: str
    min_v_pu: float
    min_v_bus: int


class ComparisonReport(BaseModel):
    motors: List[MotorComparison] = []
    snapshots: List[SnapshotRow] = []

    @computed_field
    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.motors)


# ----------------------- #
# Run bookkeeping
# ----------------------- #
class FileEntry(BaseModel):
    role: str
    path: str
    sha256: str


class RunManifest(BaseModel):
    tool_version: str
    inputs: List[FileEntry]
    outputs: List[FileEntry] = []
    config: Dict[str, Any]
    timings_s: Dict[str, float] = {}
    status: str = ""
    exit_code: Optional[int] = None
