from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field
from pydantic_settings import BaseSettings


class SolverConfig(BaseModel):
    rel_gap: float = Field(1e-4, gt=0)
    abs_gap: float = Field(1e-6, gt=0)
    cone_tol: float = Field(1e-8, gt=0)
    int_tol: float = Field(1e-6, gt=0)
    node_limit: int = Field(20000, gt=0)
    time_limit_s: Optional[float] = Field(None, gt=0)
    branching: Literal["most_fractional"] = "most_fractional"
    backend: str = "CLARABEL"
    seed: int = 0  # recorded in the run manifest; nothing in the search is random
    repair: bool = True  # SOS2 window repair at binary-integral nodes


class ModelConfig(BaseModel):
    w_re: float = Field(1.0, ge=0)
    w_op: float = Field(1e-4, ge=0)
    v_max: float = Field(1.05, gt=0)
    delta_s: float = Field(0.05, gt=0, lt=1)
    stall_margin: float = Field(0.02, gt=0)
    pwl_breakpoints: int = Field(20, ge=2)
    keep_loss_term: bool = True  # (r^2 + x^2) * F in the voltage drop
    substation_limit_pu: Optional[float] = Field(None, gt=0)
    tap_guard: float = Field(0.3, gt=0)


class SimConfig(BaseModel):
    dt_s: float = Field(0.001, gt=0)
    sweep_tol: float = Field(1e-8, gt=0)
    sweep_max_iter: int = Field(200, gt=0)
    dg_exit_voltage_pu: float = Field(0.95, gt=0)
    dg_exit_hold_s: float = Field(0.1, ge=0)
    stall_window_s: float = Field(0.5, gt=0)
    detail_window_s: float = Field(30.0, gt=0)
    voltage_tol_pu: float = Field(0.02, gt=0)
    accel_time_tol: float = Field(0.10, gt=0)
    early_window_s: float = Field(0.1, ge=0)
    accel_done_torque: float = Field(1e-3, gt=0)
    n_jobs: int = 1
    trace_every: int = Field(10, ge=1)  # CSV decimation of the trace samples


class Settings(BaseSettings):
    solver: SolverConfig = SolverConfig()
    model: ModelConfig = ModelConfig()
    simulate: SimConfig = SimConfig()
    log_level: str = "WARNING"

    class Config:
        env_file = ".env"
        env_prefix = "RESTORE_"
        env_nested_delimiter = "__"
        case_sensitive = False


def load_settings(path: Optional[str | Path] = None, **overrides: Any) -> Settings:
    """Settings from env/.env, then the JSON config file, then explicit overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    base = Settings()
    merged = base.model_dump()
    for section, values in data.items():
        if isinstance(values, dict) and isinstance(merged.get(section), dict):
            merged[section].update(values)
        else:
            merged[section] = values
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        merged.setdefault(section, {})[key] = value
    return Settings(**merged)


settings = Settings()
