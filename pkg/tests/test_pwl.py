import itertools

import numpy as np
import pytest

from app.core.errors import EncodingError, PwlDomainError
from app.services.program import ConicProgram
from app.services.pwl import (
    Breakpoints,
    bits_msb_first,
    chord_error_bound,
    decode_integer,
    encode_integer_as_binaries,
    encode_product_bin_cont,
    encode_pwl,
    pwl_evaluate,
    reciprocal,
)


def feasible(program: ConicProgram, x: np.ndarray, tol: float = 1e-9) -> bool:
    if np.any(x < np.array(program.lo) - tol) or np.any(x > np.array(program.hi) + tol):
        return False
    for row in program.rows:
        v = row.expr.value(x)
        if row.sense == "==" and abs(v) > tol:
            return False
        if row.sense == "<=" and v > tol:
            return False
    return True


def test_breakpoints_must_increase():
    with pytest.raises(PwlDomainError):
        Breakpoints(np.array([0.0, 1.0, 1.0]), np.array([0.0, 1.0, 2.0]))
    with pytest.raises(PwlDomainError):
        Breakpoints(np.array([0.0]), np.array([0.0]))
    with pytest.raises(PwlDomainError):
        Breakpoints.log_spaced(reciprocal, 0.0, 1.0, 5)


def test_pwl_evaluate_interpolates_inside_domain():
    bp = Breakpoints.sample(reciprocal, [1.0, 2.0, 4.0])
    assert pwl_evaluate(bp, 3.0) == pytest.approx(0.375)
    assert pwl_evaluate(bp, 4.0) == pytest.approx(0.25)
    with pytest.raises(PwlDomainError):
        pwl_evaluate(bp, 4.5)


def test_chord_error_bound_covers_reciprocal():
    bp = Breakpoints.log_spaced(reciprocal, 0.5, 20.0, 8)
    bound = chord_error_bound(bp, lambda a, b: 2.0 / a ** 3)
    for j, (a, b) in enumerate(zip(bp.xs[:-1], bp.xs[1:])):
        xs = np.linspace(a, b, 51)
        err = np.abs(np.interp(xs, bp.xs, bp.fs) - 1.0 / xs)
        assert err.max() <= bound[j] + 1e-12


def test_encode_pwl_rows_hold_for_adjacent_weights():
    program = ConicProgram()
    x = program.var(("x",), 1.0, 4.0)
    f, sos = encode_pwl(program, x, Breakpoints.sample(reciprocal, [1.0, 2.0, 4.0]), key=("f",))
    point = np.zeros(program.n_vars)
    point[x.idx] = 3.0
    point[f.idx] = 0.375
    for lam, w in zip(sos.lambdas, [0.0, 0.5, 0.5]):
        point[lam] = w
    assert feasible(program, point)
    assert sos.satisfied(point, 1e-9)

    point[f.idx] = 0.4
    assert not feasible(program, point)


def test_sos2_adjacency():
    program = ConicProgram()
    x = program.var(("x",), 0.0, 2.0)
    _, sos = encode_pwl(program, x, Breakpoints.sample(reciprocal, [1.0, 2.0, 3.0]), key=("f",))
    point = np.zeros(program.n_vars)
    for lam, w in zip(sos.lambdas, [0.5, 0.0, 0.5]):
        point[lam] = w
    assert not sos.satisfied(point, 1e-9)
    assert sos.x_value(point) == pytest.approx(2.0)
    assert sos.bracket(2.0) == 1
    assert sos.bracket(3.0) == 1


def test_encode_pwl_needs_bounded_argument():
    program = ConicProgram()
    x = program.var(("x",), 0.0)
    with pytest.raises(EncodingError):
        encode_pwl(program, x, Breakpoints.sample(reciprocal, [1.0, 2.0]), key=("f",))


def test_product_is_exact_at_binary_values():
    program = ConicProgram()
    b = program.var(("b",), binary=True)
    x = program.var(("x",), 0.0, 2.0)
    y = encode_product_bin_cont(program, b, x, key=("p",))
    assert program.hi[y.idx] == 2.0
    for bv, xv in itertools.product([0.0, 1.0], [0.0, 0.7, 2.0]):
        point = np.zeros(program.n_vars)
        point[b.idx], point[x.idx] = bv, xv
        point[y.idx] = bv * xv
        assert feasible(program, point)
        for delta in (-0.1, 0.1):
            point[y.idx] = bv * xv + delta
            assert not feasible(program, point)


def test_product_needs_finite_bound():
    program = ConicProgram()
    b = program.var(("b",), binary=True)
    x = program.var(("x",), 0.0)
    with pytest.raises(EncodingError):
        encode_product_bin_cont(program, b, x, key=("p",))


def test_integer_bits_cover_exactly_the_range():
    program = ConicProgram()
    expr, bits = encode_integer_as_binaries(program, -2, 2, key=("tap",))
    assert len(bits) == 3
    values = []
    for combo in itertools.product([0.0, 1.0], repeat=len(bits)):
        point = np.zeros(program.n_vars)
        for bit, v in zip(bits, combo):
            point[bit.idx] = v
        if feasible(program, point):
            values.append(expr.value(point))
            assert decode_integer(bits_msb_first(combo), -2) == expr.value(point)
    assert sorted(values) == [-2, -1, 0, 1, 2]


def test_integer_with_single_value_has_no_bits():
    program = ConicProgram()
    expr, bits = encode_integer_as_binaries(program, 3, 3)
    assert bits == []
    assert expr.const == 3.0
    with pytest.raises(EncodingError):
        encode_integer_as_binaries(program, 2, 1)


def test_bit_strings_are_msb_first():
    assert bits_msb_first([1.0, 0.0, 0.9]) == "101"
    assert decode_integer("101", -2) == 3
    assert decode_integer([0, 1, 1], -2) == 1
    assert decode_integer("", 0) == 0
