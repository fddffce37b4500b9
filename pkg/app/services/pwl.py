# app/services/pwl.py
"""Mixed-integer encodings: SOS2 piecewise-linear functions, binary x continuous products, integer bit expansion."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import EncodingError, PwlDomainError
from app.services.program import ConicProgram, LinExpr, Sos2Set, Var, lin_sum

Operand = Union[Var, LinExpr]
_DOMAIN_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Breakpoints:
    xs: np.ndarray
    fs: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        fs = np.asarray(self.fs, dtype=float)
        if xs.ndim != 1 or xs.shape != fs.shape or len(xs) < 2:
            raise PwlDomainError("breakpoints need at least two (x, f) pairs of equal length")
        if np.any(np.diff(xs) <= 0):
            raise PwlDomainError("breakpoint abscissae must strictly increase")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "fs", fs)

    @classmethod
    def sample(cls, f: Callable[[np.ndarray], np.ndarray], xs: Sequence[float]) -> "Breakpoints":
        xs = np.asarray(xs, dtype=float)
        return cls(xs, np.asarray(f(xs), dtype=float))

    @classmethod
    def log_spaced(cls, f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, n: int) -> "Breakpoints":
        if not 0 < lo < hi:
            raise PwlDomainError(f"log spacing needs 0 < lo < hi, got [{lo}, {hi}]")
        return cls.sample(f, np.geomspace(lo, hi, n))

    @property
    def domain(self) -> Tuple[float, float]:
        return float(self.xs[0]), float(self.xs[-1])

    def __len__(self) -> int:
        return len(self.xs)


def reciprocal(x):
    return 1.0 / np.asarray(x, dtype=float)


def pwl_evaluate(bp: Breakpoints, x: float) -> float:
    lo, hi = bp.domain
    tol = _DOMAIN_TOL * max(1.0, abs(lo), abs(hi))
    if x < lo - tol or x > hi + tol:
        raise PwlDomainError(f"x={x:g} outside breakpoint domain [{lo:g}, {hi:g}]")
    return float(np.interp(x, bp.xs, bp.fs))


def chord_error_bound(bp: Breakpoints, f2_max: Callable[[float, float], float]) -> np.ndarray:
    """Per-segment bound max|f''| * h^2 / 8; f2_max(a, b) gives max|f''| on [a, b]."""
    h = np.diff(bp.xs)
    return np.array([f2_max(a, b) for a, b in zip(bp.xs[:-1], bp.xs[1:])]) * h ** 2 / 8.0


def _interval(program: ConicProgram, expr: LinExpr) -> Tuple[float, float]:
    lo = hi = expr.const
    for i, c in expr.terms.items():
        a, b = program.lo[i], program.hi[i]
        lo += c * a if c > 0 else c * b
        hi += c * b if c > 0 else c * a
    return lo, hi


def encode_pwl(program: ConicProgram, x: Operand, bp: Breakpoints, key: Tuple,
               family: str = "pwl", stage: int = 0) -> Tuple[Var, Sos2Set]:
    """f = PWL(x) through convex weights on the breakpoints; adjacency is left to the branch and bound."""
    x_expr = LinExpr.of(x)
    lo, hi = _interval(program, x_expr)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise EncodingError(f"PWL argument for {key} is unbounded ({lo}, {hi})")

    lambdas = [program.var(("lambda", *key, i), 0.0, 1.0) for i in range(len(bp))]
    f = program.var(key, float(bp.fs.min()), float(bp.fs.max()))
    program.add_constraint(x_expr, "==", lin_sum(lam * xi for lam, xi in zip(lambdas, bp.xs)), family)
    program.add_constraint(f, "==", lin_sum(lam * fi for lam, fi in zip(lambdas, bp.fs)), family)
    program.add_constraint(lin_sum(lambdas), "==", 1.0, family)
    return f, program.add_sos2(lambdas, bp.xs, family, stage)


def encode_product_bin_cont(program: ConicProgram, b: Operand, x: Operand, u: Optional[float] = None,
                            key: Tuple = (), family: str = "product") -> Var:
    """y = b * x for binary b and 0 <= x <= u."""
    if u is None:
        if isinstance(x, Var):
            u = program.hi[x.idx]
        else:
            u = _interval(program, x)[1]
    if u is None or not math.isfinite(u) or u < 0:
        raise EncodingError(f"product {key} needs a finite upper bound on its continuous factor, got {u}")
    b, x = LinExpr.of(b), LinExpr.of(x)
    y = program.var(("y", *key), 0.0, u)
    program.add_constraint(y, "<=", b * u, family)
    program.add_constraint(y, "<=", x, family)
    program.add_constraint(y, ">=", x - (1.0 - b) * u, family)
    return y


def encode_integer_as_binaries(program: ConicProgram, lo: int, hi: int, key: Tuple = (),
                               family: str = "integer") -> Tuple[LinExpr, List[Var]]:
    """lo + sum 2^j b_j, capped at hi when the bit span overshoots. Bits are returned LSB first."""
    if lo > hi:
        raise EncodingError(f"empty integer range [{lo}, {hi}]")
    span = int(hi - lo)
    if span == 0:
        return LinExpr({}, float(lo)), []
    bits = [program.var(("bit", *key, j), binary=True) for j in range(span.bit_length())]
    expr = lin_sum(bit * float(2 ** j) for j, bit in enumerate(bits)) + float(lo)
    if 2 ** len(bits) - 1 > span:
        program.add_constraint(expr, "<=", float(hi), family)
    return expr, bits


def bits_msb_first(values: Sequence[float]) -> str:
    """LSB-first bit values (possibly fractional) rounded into an MSB-first string."""
    return "".join("1" if v > 0.5 else "0" for v in reversed(list(values)))


def decode_integer(bits: Union[str, Sequence[int]], lo: int) -> int:
    if isinstance(bits, str):
        return lo + (int(bits, 2) if bits else 0)
    value = 0
    for b in bits:
        value = 2 * value + int(b)
    return lo + value
