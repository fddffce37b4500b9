from __future__ import annotations

from typing import Optional


class RestorationError(Exception):
    """Base class for every error raised by the restoration toolkit."""


# ----------------------- #
# Input / network
# ----------------------- #
class SchemaError(RestorationError, ValueError):
    pass


class DanglingReferenceError(RestorationError, ValueError):
    pass


class TopologyError(RestorationError, ValueError):
    pass


class InvalidBaseError(RestorationError, ValueError):
    pass


# ----------------------- #
# Motor / encodings / model
# ----------------------- #
class MotorModelError(RestorationError, ValueError):
    pass


class StallError(MotorModelError):
    def __init__(self, message: str, step: Optional[int] = None, motor: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.motor = motor


class PwlDomainError(RestorationError, ValueError):
    pass


class EncodingError(RestorationError, ValueError):
    pass


class ModelBuildError(RestorationError, ValueError):
    pass


# ----------------------- #
# Runtime
# ----------------------- #
class PlanDecodeError(RestorationError, RuntimeError):
    pass


class ConvergenceError(RestorationError, RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ManifestMismatchError(RestorationError, RuntimeError):
    pass
