# app/services/program.py
"""Solver-neutral conic program: bounded variables, linear rows, second-order cones, SOS2 sets."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from app.schemas.reports import ModelStats

INF = float("inf")
Symbol = Tuple


# ----------------------- #
# Expressions
# ----------------------- #
@dataclass(frozen=True)
class Var:
    idx: int

    def expr(self) -> "LinExpr":
        return LinExpr({self.idx: 1.0})

    def __add__(self, other):
        return self.expr() + other

    __radd__ = __add__

    def __sub__(self, other):
        return self.expr() - other

    def __rsub__(self, other):
        return -self.expr() + other

    def __neg__(self):
        return -self.expr()

    def __mul__(self, coef: float):
        return self.expr() * coef

    __rmul__ = __mul__


@dataclass
class LinExpr:
    terms: Dict[int, float] = field(default_factory=dict)
    const: float = 0.0

    @staticmethod
    def of(value: Union["LinExpr", Var, float, int]) -> "LinExpr":
        if isinstance(value, LinExpr):
            return value
        if isinstance(value, Var):
            return value.expr()
        return LinExpr({}, float(value))

    def copy(self) -> "LinExpr":
        return LinExpr(dict(self.terms), self.const)

    def __add__(self, other):
        other = LinExpr.of(other)
        out = self.copy()
        for i, c in other.terms.items():
            out.terms[i] = out.terms.get(i, 0.0) + c
        out.const += other.const
        return out

    __radd__ = __add__

    def __neg__(self):
        return LinExpr({i: -c for i, c in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-LinExpr.of(other))

    def __rsub__(self, other):
        return LinExpr.of(other) - self

    def __mul__(self, coef: float):
        coef = float(coef)
        return LinExpr({i: c * coef for i, c in self.terms.items()}, self.const * coef)

    __rmul__ = __mul__

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.terms.items())


def lin_sum(items: Iterable) -> LinExpr:
    out = LinExpr()
    for it in items:
        e = LinExpr.of(it)
        for i, c in e.terms.items():
            out.terms[i] = out.terms.get(i, 0.0) + c
        out.const += e.const
    return out


Operand = Union[LinExpr, Var, float, int]


# ----------------------- #
# Program parts
# ----------------------- #
@dataclass
class Row:
    expr: LinExpr  # expr (sense) 0
    sense: str  # "==" or "<="
    family: str


@dataclass
class Cone:
    t: LinExpr
    xs: List[LinExpr]  # ||xs|| <= t
    family: str


@dataclass
class Sos2Set:
    id: int
    lambdas: Tuple[int, ...]
    xs: np.ndarray  # breakpoint abscissae
    family: str
    stage: int = 0  # repair order: lower stages are fixed first

    def support(self, values: np.ndarray, tol: float) -> np.ndarray:
        return np.flatnonzero(values[list(self.lambdas)] > tol)

    def satisfied(self, values: np.ndarray, tol: float) -> bool:
        nz = self.support(values, tol)
        return len(nz) <= 1 or (len(nz) == 2 and nz[1] - nz[0] == 1)

    def x_value(self, values: np.ndarray) -> float:
        return float(np.dot(values[list(self.lambdas)], self.xs))

    def bracket(self, x: float) -> int:
        j = int(np.searchsorted(self.xs, x, side="right")) - 1
        return min(max(j, 0), len(self.xs) - 2)


class VariableMap:
    """Bidirectional map between model symbols (tuples) and variable ids."""

    def __init__(self):
        self._by_symbol: Dict[Symbol, int] = {}
        self._by_id: Dict[int, Symbol] = {}

    def add(self, symbol: Symbol, idx: int) -> None:
        if symbol in self._by_symbol:
            raise KeyError(f"symbol {symbol} already mapped")
        self._by_symbol[symbol] = idx
        self._by_id[idx] = symbol

    def __getitem__(self, symbol: Symbol) -> int:
        return self._by_symbol[symbol]

    def __contains__(self, symbol: Symbol) -> bool:
        return symbol in self._by_symbol

    def __len__(self) -> int:
        return len(self._by_symbol)

    def get(self, symbol: Symbol, default=None):
        return self._by_symbol.get(symbol, default)

    def symbol(self, idx: int) -> Symbol:
        return self._by_id[idx]

    def items(self, family: Optional[str] = None):
        for sym, idx in self._by_symbol.items():
            if family is None or sym[0] == family:
                yield sym, idx

    def families(self) -> Counter:
        return Counter(sym[0] for sym in self._by_symbol)


def symbol_name(symbol: Symbol) -> str:
    return f"{symbol[0]}[{','.join(str(s) for s in symbol[1:])}]"


def _tag_order(tag: str) -> Tuple[int, str]:
    digits = ""
    for ch in tag:
        if not ch.isdigit():
            break
        digits += ch
    return (int(digits) if digits else 0, tag[len(digits):])


@dataclass
class ArrayForm:
    c: np.ndarray
    c0: float
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    a_ub: sp.csr_matrix
    b_ub: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    cones: Dict[int, Tuple[sp.csr_matrix, np.ndarray, List[Tuple[sp.csr_matrix, np.ndarray]]]]


class ConicProgram:
    def __init__(self, name: str = ""):
        self.name = name
        self.names: List[str] = []
        self.lo: List[float] = []
        self.hi: List[float] = []
        self.is_binary: List[bool] = []
        self.rows: List[Row] = []
        self.cones: List[Cone] = []
        self.sos2: List[Sos2Set] = []
        self.objective = LinExpr()
        self.vmap = VariableMap()
        self.certificates: List[str] = []  # infeasibility evidence found while building
        self.parts: Dict[str, LinExpr] = {}  # named objective components
        self.meta: Dict[str, float] = {}
        self.equation_tags: Dict[str, str] = {}  # constraint family -> formulation reference

    # ----------------------- #
    # Variables
    # ----------------------- #
    def add_var(self, name: str, lo: float = -INF, hi: float = INF, binary: bool = False) -> Var:
        if binary:
            lo, hi = max(lo, 0.0), min(hi, 1.0)
        self.names.append(name)
        self.lo.append(float(lo))
        self.hi.append(float(hi))
        self.is_binary.append(binary)
        return Var(len(self.names) - 1)

    def var(self, symbol: Symbol, lo: float = -INF, hi: float = INF, binary: bool = False) -> Var:
        """Get-or-create the variable that is the home of `symbol`."""
        idx = self.vmap.get(symbol)
        if idx is not None:
            return Var(idx)
        v = self.add_var(symbol_name(symbol), lo, hi, binary)
        self.vmap.add(symbol, v.idx)
        return v

    def has(self, symbol: Symbol) -> bool:
        return symbol in self.vmap

    def bounds(self, v: Var) -> Tuple[float, float]:
        return self.lo[v.idx], self.hi[v.idx]

    def set_bounds(self, v: Var, lo: Optional[float] = None, hi: Optional[float] = None) -> None:
        if lo is not None:
            self.lo[v.idx] = float(lo)
        if hi is not None:
            self.hi[v.idx] = float(hi)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def binaries(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.is_binary, dtype=bool))

    # ----------------------- #
    # Constraints
    # ----------------------- #
    def add_constraint(self, lhs: Operand, sense: str, rhs: Operand = 0.0, family: str = "") -> Row:
        expr = LinExpr.of(lhs) - LinExpr.of(rhs)
        if sense == ">=":
            expr, sense = -expr, "<="
        if sense not in ("==", "<="):
            raise ValueError(f"unknown sense {sense!r}")
        self._check(expr)
        row = Row(expr, sense, family)
        self.rows.append(row)
        return row

    def add_cone(self, t: Operand, xs: Sequence[Operand], family: str = "") -> Cone:
        cone = Cone(LinExpr.of(t), [LinExpr.of(x) for x in xs], family)
        for e in [cone.t, *cone.xs]:
            self._check(e)
        self.cones.append(cone)
        return cone

    def add_rotated_cone(self, a: Operand, b: Operand, xs: Sequence[Operand], family: str = "") -> Cone:
        """sum(xs^2) <= a * b with a, b >= 0, as ||(2 xs, a - b)|| <= a + b."""
        a, b = LinExpr.of(a), LinExpr.of(b)
        return self.add_cone(a + b, [LinExpr.of(x) * 2.0 for x in xs] + [a - b], family)

    def add_sos2(self, lambdas: Sequence[Var], xs: Sequence[float], family: str = "sos2", stage: int = 0) -> Sos2Set:
        s = Sos2Set(len(self.sos2), tuple(v.idx for v in lambdas), np.asarray(xs, dtype=float), family, stage)
        self.sos2.append(s)
        return s

    def set_objective(self, expr: Operand) -> None:
        expr = LinExpr.of(expr)
        self._check(expr)
        self.objective = expr

    def permuted(self, order: Sequence[int]) -> "ConicProgram":
        """Copy whose variable i is variable order[i] of this program."""
        order = [int(i) for i in order]
        if sorted(order) != list(range(self.n_vars)):
            raise ValueError("order must be a permutation of the variable ids")
        new_id = {old: new for new, old in enumerate(order)}

        def move(e: LinExpr) -> LinExpr:
            return LinExpr({new_id[i]: c for i, c in e.terms.items()}, e.const)

        out = ConicProgram(self.name)
        for old in order:
            out.add_var(self.names[old], self.lo[old], self.hi[old], self.is_binary[old])
        for sym, idx in self.vmap.items():
            out.vmap.add(sym, new_id[idx])
        out.rows = [Row(move(r.expr), r.sense, r.family) for r in self.rows]
        out.cones = [Cone(move(c.t), [move(x) for x in c.xs], c.family) for c in self.cones]
        out.sos2 = [Sos2Set(s.id, tuple(new_id[v] for v in s.lambdas), s.xs.copy(), s.family, s.stage)
                    for s in self.sos2]
        out.objective = move(self.objective)
        out.parts = {k: move(v) for k, v in self.parts.items()}
        out.certificates = list(self.certificates)
        out.meta = dict(self.meta)
        out.equation_tags = dict(self.equation_tags)
        return out

    def _check(self, expr: LinExpr) -> None:
        n = self.n_vars
        for i in expr.terms:
            if not 0 <= i < n:
                raise KeyError(f"expression references undeclared variable {i}")

    # ----------------------- #
    # Export
    # ----------------------- #
    def stats(self) -> ModelStats:
        constraints = Counter(r.family for r in self.rows)
        constraints.update(c.family for c in self.cones)
        constraints.update(f"sos2:{s.family}" for s in self.sos2)
        tags = {f: self.equation_tags[f] for f in constraints if f in self.equation_tags}
        equations = Counter()
        for f, tag in tags.items():
            equations[tag] += constraints[f]
        return ModelStats(
            variables=dict(sorted(self.vmap.families().items())),
            constraints=dict(sorted(constraints.items())),
            equations=dict(sorted(equations.items(), key=lambda kv: _tag_order(kv[0]))),
            tags=dict(sorted(tags.items())),
            binaries=int(sum(self.is_binary)),
            continuous=int(self.n_vars - sum(self.is_binary)),
            cones=len(self.cones),
            sos2_sets=len(self.sos2),
        )

    def _matrix(self, exprs: List[LinExpr]) -> Tuple[sp.csr_matrix, np.ndarray]:
        rows, cols, vals = [], [], []
        for r, e in enumerate(exprs):
            for i, c in e.terms.items():
                if c != 0.0:
                    rows.append(r)
                    cols.append(i)
                    vals.append(c)
        m = sp.csr_matrix((vals, (rows, cols)), shape=(len(exprs), self.n_vars))
        return m, np.array([e.const for e in exprs], dtype=float)

    def to_arrays(self) -> ArrayForm:
        n = self.n_vars
        c = np.zeros(n)
        for i, v in self.objective.terms.items():
            c[i] += v
        eq = [r.expr for r in self.rows if r.sense == "=="]
        ub = [r.expr for r in self.rows if r.sense == "<="]
        a_eq, k_eq = self._matrix(eq)
        a_ub, k_ub = self._matrix(ub)
        by_dim: Dict[int, List[Cone]] = {}
        for cone in self.cones:
            by_dim.setdefault(len(cone.xs), []).append(cone)
        cones = {}
        for dim, group in sorted(by_dim.items()):
            t_mat, t0 = self._matrix([g.t for g in group])
            parts = [self._matrix([g.xs[j] for g in group]) for j in range(dim)]
            cones[dim] = (t_mat, t0, parts)
        return ArrayForm(
            c=c,
            c0=self.objective.const,
            a_eq=a_eq,
            b_eq=-k_eq,
            a_ub=a_ub,
            b_ub=-k_ub,
            lo=np.array(self.lo, dtype=float),
            hi=np.array(self.hi, dtype=float),
            cones=cones,
        )


@dataclass
class ModelSolution:
    vmap: VariableMap
    x: np.ndarray
    objective: float
    meta: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def of(cls, program: ConicProgram, x: np.ndarray, objective: float) -> "ModelSolution":
        return cls(program.vmap, np.asarray(x, dtype=float), float(objective), dict(program.meta))

    def __getitem__(self, symbol: Symbol) -> float:
        return float(self.x[self.vmap[symbol]])

    def get(self, symbol: Symbol, default: Optional[float] = None) -> Optional[float]:
        idx = self.vmap.get(symbol)
        return default if idx is None else float(self.x[idx])
