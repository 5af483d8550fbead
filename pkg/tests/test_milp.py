"""MILP model construction, linearization helpers, and the solve contract."""

import itertools
import random
from fractions import Fraction

import pytest

from digisim.errors import BigMTooSmall, SolveError
from digisim.milp import (
    EQ,
    GE,
    LE,
    MilpModel,
    MilpSolution,
    SolveStatus,
    VarKind,
    add_abs_deviation,
    add_indicator_window,
    default_big_m,
    solve,
)


class TestModelConstruction:
    def test_duplicate_variable_rejected(self):
        m = MilpModel()
        m.add_var("x", 0, 5, VarKind.INTEGER)
        with pytest.raises(ValueError):
            m.add_var("x", 0, 5, VarKind.INTEGER)

    def test_integer_needs_finite_bounds(self):
        m = MilpModel()
        with pytest.raises(ValueError):
            m.add_var("x", 0, None, VarKind.INTEGER)

    def test_unknown_variable_in_constraint(self):
        m = MilpModel()
        m.add_var("x", 0, 5, VarKind.INTEGER)
        with pytest.raises(ValueError):
            m.add_constraint({"ghost": 1}, LE, 3)
        with pytest.raises(ValueError):
            m.add_objective_term("ghost", 1)

    def test_binary_bounds(self):
        m = MilpModel()
        m.add_var("b", kind=VarKind.BINARY)
        with pytest.raises(ValueError):
            m.add_var("b2", 0, 2, VarKind.BINARY)

    def test_lp_text_dump(self):
        m = MilpModel("demo")
        m.add_var("x", 0, 5, VarKind.INTEGER)
        m.add_var("lam", 0, None)
        m.add_constraint({"x": 1, "lam": -1}, LE, 3, name="dev")
        m.minimize({"lam": 1})
        text = m.to_lp_text()
        assert "Minimize" in text and "dev:" in text and "General" in text
        assert "End" in text


class TestAbsDeviation:
    def test_fixed_point_deviation(self):
        m = MilpModel()
        m.add_var("x", 7, 7, VarKind.INTEGER)
        m.add_var("lam", 0, None)
        add_abs_deviation(m, {"x": 1}, "lam", constant=-5)
        m.minimize({"lam": 1})
        sol = solve(m)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.values["lam"] == 2

    def test_zero_expression(self):
        m = MilpModel()
        m.add_var("lam", 0, None)
        add_abs_deviation(m, {}, "lam")
        m.minimize({"lam": 1})
        sol = solve(m)
        assert sol.values["lam"] == 0

    def test_free_point_reaches_zero(self):
        m = MilpModel()
        m.add_var("x", 0, 10, VarKind.INTEGER)
        m.add_var("lam", 0, None)
        add_abs_deviation(m, {"x": 1}, "lam", constant=-3)
        m.minimize({"lam": 1})
        sol = solve(m)
        assert sol.values["lam"] == 0
        assert sol.values["x"] == 3

    def test_requires_nonnegative_bound_var(self):
        m = MilpModel()
        m.add_var("x", 0, 10, VarKind.INTEGER)
        m.add_var("lam", None, None)
        with pytest.raises(ValueError):
            add_abs_deviation(m, {"x": 1}, "lam")


class TestIndicatorWindow:
    def build(self, x_fixed, h_fixed):
        m = MilpModel()
        m.add_var("h", 0, 50, VarKind.INTEGER)
        m.add_var("x", x_fixed, x_fixed, VarKind.BINARY)
        add_indicator_window(m, "h", "x", 10, 19, 100)
        m.add_constraint({"h": 1}, EQ, h_fixed)
        return m

    def test_inactive_indicator_leaves_h_free(self):
        sol = solve(self.build(0, 3))
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.values["h"] == 3

    def test_active_indicator_forces_window(self):
        assert solve(self.build(1, 3)).status is SolveStatus.INFEASIBLE
        sol = solve(self.build(1, 15))
        assert sol.status is SolveStatus.OPTIMAL

    def test_big_m_too_small(self):
        m = MilpModel()
        m.add_var("h", 0, 50, VarKind.INTEGER)
        m.add_var("x", kind=VarKind.BINARY)
        with pytest.raises(BigMTooSmall):
            add_indicator_window(m, "h", "x", 10, 19, 30)

    def test_requires_binary_indicator(self):
        m = MilpModel()
        m.add_var("h", 0, 50, VarKind.INTEGER)
        m.add_var("x", 0, 1, VarKind.INTEGER)
        with pytest.raises(ValueError):
            add_indicator_window(m, "h", "x", 10, 19, 100)

    def test_default_big_m(self):
        assert default_big_m(100, 40) == 141


class TestSolveContract:
    def test_single_variable(self):
        m = MilpModel()
        m.add_var("x", 0, 100, VarKind.INTEGER)
        m.add_constraint({"x": 1}, GE, 3)
        m.minimize({"x": 1})
        sol = solve(m)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.values["x"] == 3
        assert sol.objective == 3
        assert sol.proven_gap == 0.0

    def test_bound_conflict_infeasible_with_hint(self):
        m = MilpModel()
        m.add_var("x", 0, 4, VarKind.INTEGER)
        m.add_var("y", 0, 4, VarKind.INTEGER)
        m.add_constraint({"x": 1, "y": 1}, EQ, 10, name="sum_row")
        sol = solve(m)
        assert sol.status is SolveStatus.INFEASIBLE
        assert "sum_row" in sol.message

    def test_fillgaps_instance(self):
        # unknowns x1 in [2,8], x2 in [1,5] summing to 10; minimize the
        # largest excess over the lower bounds
        m = MilpModel("fill")
        m.add_var("x1", 2, 8, VarKind.INTEGER)
        m.add_var("x2", 1, 5, VarKind.INTEGER)
        m.add_var("lam0", 0, None)
        m.add_constraint({"x1": 1, "x2": 1}, EQ, 10)
        m.add_constraint({"x1": 1, "lam0": -1}, LE, 2)
        m.add_constraint({"x2": 1, "lam0": -1}, LE, 1)
        m.minimize({"lam0": 1})
        sol = solve(m)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.objective == 4

    def test_exact_fractional_continuous_value(self):
        m = MilpModel()
        m.add_var("x", 0, 2, VarKind.INTEGER)
        m.add_var("lam", 0, None)
        m.add_constraint({"x": 1, "lam": 2}, EQ, 3)
        m.minimize({"lam": 1})
        sol = solve(m)
        assert sol.values["x"] == 2
        assert sol.values["lam"] == Fraction(1, 2)
        assert isinstance(sol.values["lam"], Fraction)

    def test_empty_model(self):
        sol = solve(MilpModel())
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.objective == 0

    def test_unbounded_raises(self):
        m = MilpModel()
        m.add_var("x", None, 0)
        m.minimize({"x": 1})
        with pytest.raises(SolveError):
            solve(m)

    def test_determinism(self):
        def build():
            m = MilpModel()
            for i in range(5):
                m.add_var(f"x{i}", 0, 7, VarKind.INTEGER)
            m.add_constraint({f"x{i}": 1 for i in range(5)}, EQ, 17)
            m.add_constraint({"x0": 2, "x3": -1}, LE, 5)
            m.minimize({f"x{i}": (i % 3) - 1 for i in range(5)})
            return m

        a = solve(build())
        b = solve(build())
        assert a.values == b.values
        assert a.objective == b.objective


def random_integer_model(rng):
    n = rng.randint(1, 6)
    bounds = []
    for _ in range(n):
        lo = rng.randint(0, 15)
        bounds.append((lo, min(20, lo + rng.randint(0, 4))))
    m = MilpModel("rand")
    for i, (lo, up) in enumerate(bounds):
        m.add_var(f"x{i}", lo, up, VarKind.INTEGER)
    cons = []
    for _ in range(rng.randint(0, 4)):
        coeffs = [rng.randint(-3, 3) for _ in range(n)]
        sense = rng.choice([LE, GE, EQ])
        point = [rng.randint(lo, up) for lo, up in bounds]
        rhs = sum(c * v for c, v in zip(coeffs, point)) + rng.randint(-2, 2)
        m.add_constraint({f"x{i}": c for i, c in enumerate(coeffs) if c}, sense, rhs)
        cons.append((coeffs, sense, rhs))
    obj = [rng.randint(-5, 5) for _ in range(n)]
    m.minimize({f"x{i}": c for i, c in enumerate(obj) if c})
    return m, bounds, cons, obj


def enumerate_optimum(bounds, cons, obj):
    best = None
    for point in itertools.product(*[range(lo, up + 1) for lo, up in bounds]):
        ok = True
        for coeffs, sense, rhs in cons:
            act = sum(c * v for c, v in zip(coeffs, point))
            if sense == LE and act > rhs:
                ok = False
            elif sense == GE and act < rhs:
                ok = False
            elif sense == EQ and act != rhs:
                ok = False
            if not ok:
                break
        if ok:
            val = sum(c * v for c, v in zip(obj, point))
            if best is None or val < best:
                best = val
    return best


class TestAgainstEnumeration:
    @pytest.mark.parametrize("seed", range(60))
    def test_optimum_matches_brute_force(self, seed):
        rng = random.Random(7000 + seed)
        model, bounds, cons, obj = random_integer_model(rng)
        sol = solve(model)
        best = enumerate_optimum(bounds, cons, obj)
        if best is None:
            assert sol.status is SolveStatus.INFEASIBLE
        else:
            assert sol.status is SolveStatus.OPTIMAL
            assert sol.objective == best
            # solution satisfies every row exactly
            for coeffs, sense, rhs in cons:
                act = sum(c * sol.values[f"x{i}"] for i, c in enumerate(coeffs))
                assert (act <= rhs if sense == LE
                        else act >= rhs if sense == GE
                        else act == rhs)
            for i, (lo, up) in enumerate(bounds):
                assert lo <= sol.values[f"x{i}"] <= up
