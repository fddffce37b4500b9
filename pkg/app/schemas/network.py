from pydantic import BaseModel, ConfigDict, Field
from typing import Optional, List, Literal, Tuple, Union


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)


class BaseSpec(_Frozen):
    power_va: float
    voltage_v: float

    @property
    def z_base(self) -> float:
        return self.voltage_v ** 2 / self.power_va

    @property
    def i_base(self) -> float:
        # single-phase equivalent: I = S / V
        return self.power_va / self.voltage_v


class BusSpec(_Frozen):
    id: int
    slack: bool = False
    protected: bool = False


class LineSpec(_Frozen):
    from_bus: int = Field(alias="from")
    to_bus: int = Field(alias="to")
    r_pu: float
    x_pu: float
    ampacity_pu: Optional[float] = None  # current magnitude, squared on use
    protected: bool = False
    closed: bool = True


class StaticLoadSpec(_Frozen):
    bus: int
    p0_profile: List[float]
    q0_profile: List[float]
    kp: float = 2.0
    kq: float = 2.0
    priority: float = 1.0


class MechSpec(_Frozen):
    kind: Literal["linear", "constant", "quadratic"] = "linear"
    t_nom_pu: Optional[float] = None  # on the motor's own torque base
    t_nom_nm: Optional[float] = None


class MotorSpec(_Frozen):
    bus: int
    rs: float
    xls: float
    rr: float
    xlr: float
    xm: float
    unit: Literal["ohm", "pu"] = "pu"
    h_s: float
    kd_pu: float = 0.0
    rated_va: float
    mech: MechSpec = MechSpec()
    poles: int = 4
    freq_hz: float = 50.0
    priority: float = 1.0


class DgSpec(_Frozen):
    bus: int
    f_max_pu: Optional[float] = None
    frt: bool = True
    p_set_pu: float = 0.0  # normal-state set points
    q_set_pu: float = 0.0


class ImpedanceSpec(_Frozen):
    r: float = 0.0
    x: float = 0.0


class AutotransformerSpec(_Frozen):
    bus: int
    sigma: float
    taps: Union[int, Tuple[int, int]] = 5  # count n -> {-n//2..n//2}, or explicit [lo, hi]
    zp: ImpedanceSpec = ImpedanceSpec()
    zs: ImpedanceSpec = ImpedanceSpec()
    bypass_speed: float = 0.80

    @property
    def tap_range(self) -> Tuple[int, int]:
        if isinstance(self.taps, int):
            half = self.taps // 2
            return -half, half
        return int(self.taps[0]), int(self.taps[1])


class NodeCurveSpec(_Frozen):
    bus: int
    curve: List[Tuple[float, float]]  # [t_s, v_pu]


class LineCurveSpec(_Frozen):
    from_bus: int = Field(alias="from")
    to_bus: int = Field(alias="to")
    curve: List[Tuple[float, float]]  # [t_s, i_pu]


class ProtectionSpec(_Frozen):
    nodes: List[NodeCurveSpec] = []
    lines: List[LineCurveSpec] = []


class NetworkFile(_Frozen):
    name: Optional[str] = None
    note: Optional[str] = None
    base: BaseSpec
    slack_voltage_pu: float = 1.0
    buses: List[BusSpec]
    lines: List[LineSpec]
    static_loads: List[StaticLoadSpec] = []
    motors: List[MotorSpec] = []
    dgs: List[DgSpec] = []
    autotransformers: List[AutotransformerSpec] = []
    protection: ProtectionSpec = ProtectionSpec()
