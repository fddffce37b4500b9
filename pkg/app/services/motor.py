# app/services/motor.py
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from app.core.errors import MotorModelError, StallError
from app.schemas.network import MechSpec, MotorSpec

DEFAULT_STALL_MARGIN = 0.02


@dataclass(frozen=True)
class TheveninEquivalent:
    u_th_coeff: float  # |V_th / V|^2
    r_th: float
    x_th: float


@dataclass(frozen=True, eq=False)
class SlipStepModel:
    """Per-step constants of one motor start. Torques on the motor's own base, powers on the network base."""

    bus: int
    slips: np.ndarray
    c: np.ndarray  # T_ele = c * U
    g: np.ndarray  # P = g * U
    b: np.ndarray  # Q = b * U
    t_mec: np.ndarray
    friction: np.ndarray  # Kd * (1 - S_k)
    h_s: float
    delta_s: float
    stall_margin: float = DEFAULT_STALL_MARGIN

    @property
    def k_max(self) -> int:
        return len(self.slips)

    @property
    def load_torque(self) -> np.ndarray:
        return self.t_mec + self.friction

    def accel_torque(self, u) -> np.ndarray:
        return self.c * np.asarray(u, dtype=float) - self.load_torque

    def with_torque_scale(self, factor: float) -> "SlipStepModel":
        return SlipStepModel(
            self.bus, self.slips, self.c * factor, self.g, self.b, self.t_mec, self.friction,
            self.h_s, self.delta_s, self.stall_margin,
        )


# ----------------------- #
# Equivalent circuit
# ----------------------- #
def thevenin_at_slip(params: MotorSpec) -> TheveninEquivalent:
    """Stator + magnetizing branch reduced at the rotor terminals."""
    if params.xm == 0:
        raise MotorModelError("magnetizing reactance is zero; Thevenin reduction is degenerate")
    zs = complex(params.rs, params.xls)
    zm = 1j * params.xm
    ratio = zm / (zs + zm)
    zth = zm * zs / (zs + zm)
    return TheveninEquivalent(abs(ratio) ** 2, zth.real, zth.imag)


def _check_slip(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise MotorModelError("slip must be > 0")
    return s


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def electrical_torque(th: TheveninEquivalent, x_lr: float, r_r: float, s, u):
    s = _check_slip(s)
    rr_s = r_r / s
    t = rr_s * th.u_th_coeff * np.asarray(u, dtype=float) / ((th.r_th + rr_s) ** 2 + (th.x_th + x_lr) ** 2)
    return _out(t)


def input_impedance(params: MotorSpec, s):
    s = _check_slip(s)
    zr = params.rr / s + 1j * params.xlr
    zm = 1j * params.xm
    return complex(params.rs, params.xls) + zm * zr / (zr + zm)


def input_admittance(params: MotorSpec, s) -> Tuple:
    y = 1.0 / input_impedance(params, s)
    return _out(np.real(y)), _out(-np.imag(y))


def direct_circuit_torque(params: MotorSpec, s: float, u: float) -> float:
    """Airgap torque |I_r|^2 R_r / s from a full phasor solution of the circuit."""
    s = float(_check_slip(s))
    v = math.sqrt(u)
    i_s = v / input_impedance(params, s)
    v_m = v - i_s * complex(params.rs, params.xls)
    i_r = v_m / complex(params.rr / s, params.xlr)
    return abs(i_r) ** 2 * params.rr / s


def peak_torque_slip(params: MotorSpec) -> float:
    th = thevenin_at_slip(params)
    return params.rr / math.hypot(th.r_th, th.x_th + params.xlr)


# ----------------------- #
# Mechanics
# ----------------------- #
def mechanical_torque(mech: MechSpec, s):
    s = np.asarray(s, dtype=float)
    t_nom = mech.t_nom_pu or 0.0
    if mech.kind == "linear":
        t = t_nom * (1.0 - s)
    elif mech.kind == "quadratic":
        t = t_nom * (1.0 - s) ** 2
    else:
        t = t_nom * np.ones_like(s)
    return _out(t)


def step_time(t_ele: float, t_mec: float, kd: float, s: float, h_s: float, delta_s: float,
              eps: float = DEFAULT_STALL_MARGIN) -> float:
    if delta_s <= 0:
        raise MotorModelError("slip step must be > 0")
    t_acc = t_ele - t_mec - kd * (1.0 - s)
    if t_acc <= eps:
        raise StallError(f"accelerating torque {t_acc:.4g} <= stall margin {eps:g} at slip {s:g}")
    return 2.0 * h_s * delta_s / t_acc


def acceleration_schedule(model: SlipStepModel, u_k, h_s: Optional[float] = None,
                          delta_s: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Step durations and cumulative times for per-step squared voltages u_k."""
    h_s = model.h_s if h_s is None else h_s
    delta_s = model.delta_s if delta_s is None else delta_s
    u_k = np.broadcast_to(np.asarray(u_k, dtype=float), model.slips.shape)
    dt = np.empty(model.k_max)
    for k in range(model.k_max):
        try:
            # friction already folded into the load torque
            dt[k] = step_time(model.c[k] * u_k[k], model.load_torque[k], 0.0, model.slips[k],
                              h_s, delta_s, model.stall_margin)
        except StallError as exc:
            raise StallError(f"motor at {model.bus} stalls at step {k + 1}: {exc}", step=k + 1, motor=model.bus) from exc
    return dt, np.cumsum(dt)


# ----------------------- #
# Slip discretization
# ----------------------- #
def torque_scale(params: MotorSpec, s_base: float) -> float:
    return s_base / params.rated_va


def rated_slip(params: MotorSpec, s_base: float) -> float:
    """Stable operating slip at U = 1 (electrical torque meets the load)."""
    th = thevenin_at_slip(params)
    scale = torque_scale(params, s_base)

    def net(s: float) -> float:
        return (electrical_torque(th, params.xlr, params.rr, s, 1.0) * scale
                - mechanical_torque(params.mech, s) - params.kd_pu * (1.0 - s))

    s_hi = min(peak_torque_slip(params), 1.0)
    if net(s_hi) <= 0:
        raise StallError(f"motor at {params.bus} cannot carry its load at nominal voltage", motor=params.bus)
    s_lo = 1e-12
    if net(s_lo) >= 0:
        return 0.0
    return float(brentq(net, s_lo, s_hi, xtol=1e-14))


def default_k_max(params: MotorSpec, s_base: float, delta_s: float) -> int:
    k = math.ceil((1.0 - rated_slip(params, s_base)) / delta_s - 1e-9)
    while k > 1 and 1.0 - (k - 1) * delta_s <= 1e-12:
        k -= 1
    return max(k, 1)


def slip_grid(delta_s: float, k_max: int) -> np.ndarray:
    if delta_s <= 0:
        raise MotorModelError("slip step must be > 0")
    slips = 1.0 - delta_s * np.arange(k_max)
    if k_max < 1 or slips[-1] <= 0:
        raise MotorModelError(f"k_max={k_max} with slip step {delta_s} reaches slip <= 0")
    return slips


def build_slip_model(params: MotorSpec, s_base: float, delta_s: float, k_max: Optional[int] = None,
                     stall_margin: float = DEFAULT_STALL_MARGIN) -> SlipStepModel:
    th = thevenin_at_slip(params)
    if k_max is None:
        k_max = default_k_max(params, s_base, delta_s)
    slips = slip_grid(delta_s, k_max)
    c = np.asarray(electrical_torque(th, params.xlr, params.rr, slips, 1.0)) * torque_scale(params, s_base)
    g, b = input_admittance(params, slips)
    return SlipStepModel(
        bus=params.bus,
        slips=slips,
        c=np.atleast_1d(c),
        g=np.atleast_1d(g),
        b=np.atleast_1d(b),
        t_mec=np.atleast_1d(mechanical_torque(params.mech, slips)),
        friction=params.kd_pu * (1.0 - slips),
        h_s=params.h_s,
        delta_s=delta_s,
        stall_margin=stall_margin,
    )


def running_load(params: MotorSpec, s_base: float) -> Tuple[float, float]:
    """Steady-state P, Q of a running motor at nominal voltage."""
    try:
        s = max(rated_slip(params, s_base), 1e-9)
    except StallError:
        s = peak_torque_slip(params)
    g, b = input_admittance(params, s)
    return float(g), float(b)
