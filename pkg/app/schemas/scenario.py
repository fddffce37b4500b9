from pydantic import BaseModel, ConfigDict
from typing import Optional, List, Dict, Tuple


class HorizonSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: str = "00:00"  # HH:MM
    end: str = "24:00"
    step_minutes: int = 60


class ScenarioFile(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: Optional[str] = None
    horizon: HorizonSpec = HorizonSpec()
    l0: Dict[int, List[int]]  # stage-1 plan for the off-outage buses
    closed_lines: Optional[List[Tuple[int, int]]] = None
    w_re: Optional[float] = None
    w_op: Optional[float] = None
    delta_s: Optional[float] = None
    k_max: Dict[int, int] = {}
    one_motor_per_step: bool = True
