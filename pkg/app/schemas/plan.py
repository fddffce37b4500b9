from pydantic import BaseModel
from typing import Optional, List, Dict, Literal


class LoadRow(BaseModel):
    bus: int
    kind: Literal["static", "motor", "mixed"]
    l0: List[int]
    l: List[int]
    shifted_steps: List[int]  # steps where L0 = 1 but the load stays off


class MotorStep(BaseModel):
    k: int
    slip: float
    u_motor: float
    t_ele_pu: float
    dt_s: float
    t_s: float


class MotorStart(BaseModel):
    bus: int
    start_step: Optional[int] = None
    start_label: Optional[str] = None
    tap: Optional[int] = None
    tap_bits: Optional[str] = None  # MSB first
    predicted_time_s: float
    steps: List[MotorStep]
    bus_u: Dict[str, List[float]]  # node -> squared voltage per step


class DgReference(BaseModel):
    bus: int
    motor_bus: int
    fp_pu2: float
    fq_pu2: float
    ip_pu: float  # signed with the active injection
    iq_pu: float  # signed with the reactive injection
    fp_a2: float
    fq_a2: float
    ip_a: float
    iq_a: float


class ObjectiveBreakdown(BaseModel):
    total: float
    reliability: float
    operational: float
    w_re: float
    w_op: float


class RestorationPlan(BaseModel):
    network: Optional[str] = None
    scenario: Optional[str] = None
    step_minutes: int
    labels: List[str]
    loads: List[LoadRow]
    motors: List[MotorStart]
    dg_references: List[DgReference]
    objective: ObjectiveBreakdown
    proven_optimal: bool
    gap: float
    nodes: int
    exactness: str = "exactness unverified"

    def row(self, bus: int) -> LoadRow:
        for r in self.loads:
            if r.bus == bus:
                return r
        raise KeyError(bus)

    def motor(self, bus: int) -> MotorStart:
        for m in self.motors:
            if m.bus == bus:
                return m
        raise KeyError(bus)
