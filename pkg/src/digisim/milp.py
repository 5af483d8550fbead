"""Canonical mixed-integer linear programs and a deterministic solve contract.

Models are built variable-by-variable with exact rational coefficients.
Solving delegates the combinatorial search to HiGHS (via
``scipy.optimize.milp``) pinned to one thread and a fixed seed, then
re-derives the continuous part of the incumbent exactly over rationals so
every returned solution re-validates against the model with integer
arithmetic where rows are integral.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import optimize, sparse

from . import simplex
from .errors import BigMTooSmall, SolveError

LE = "<="
EQ = "="
GE = ">="


class VarKind(str, enum.Enum):
    CONTINUOUS = "CONTINUOUS"
    INTEGER = "INTEGER"
    BINARY = "BINARY"


class SolveStatus(str, enum.Enum):
    OPTIMAL = "OPTIMAL"
    FEASIBLE_WITHIN_GAP = "FEASIBLE_WITHIN_GAP"
    INFEASIBLE = "INFEASIBLE"
    GAP_NOT_REACHED = "GAP_NOT_REACHED"


def _rat(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise ValueError(f"non-finite coefficient {value}")
        return Fraction(float(value))
    raise TypeError(f"unsupported numeric type {type(value)!r}")


@dataclass(frozen=True)
class _Variable:
    name: str
    lower: Fraction | None
    upper: Fraction | None
    kind: VarKind


@dataclass(frozen=True)
class _Constraint:
    name: str
    coeffs: tuple[tuple[int, Fraction], ...]
    sense: str
    rhs: Fraction


@dataclass
class MilpModel:
    """A minimization MILP assembled in deterministic insertion order."""

    name: str = "model"
    _vars: list = field(default_factory=list)
    _index: dict = field(default_factory=dict)
    _constraints: list = field(default_factory=list)
    _objective: dict = field(default_factory=dict)

    # -- construction ------------------------------------------------------

    def add_var(self, name: str, lower=0, upper=None,
                kind: VarKind = VarKind.CONTINUOUS) -> str:
        if name in self._index:
            raise ValueError(f"duplicate variable {name!r}")
        if kind is VarKind.BINARY:
            lo = _rat(0 if lower is None else lower)
            up = _rat(1 if upper is None else upper)
            if not (0 <= lo <= up <= 1):
                raise ValueError(f"binary variable {name!r} bounds outside [0, 1]")
        else:
            lo = None if lower is None else _rat(lower)
            up = None if upper is None else _rat(upper)
            if lo is not None and up is not None and lo > up:
                raise ValueError(f"variable {name!r} has empty domain [{lo}, {up}]")
            if kind is VarKind.INTEGER and (lo is None or up is None):
                raise ValueError(f"integer variable {name!r} needs finite bounds")
        self._index[name] = len(self._vars)
        self._vars.append(_Variable(name, lo, up, kind))
        return name

    def set_bounds(self, name: str, lower=None, upper=None) -> None:
        i = self._index[name]
        v = self._vars[i]
        lo = v.lower if lower is None else _rat(lower)
        up = v.upper if upper is None else _rat(upper)
        if lo is not None and up is not None and lo > up:
            raise ValueError(f"variable {name!r} would get empty domain [{lo}, {up}]")
        self._vars[i] = _Variable(v.name, lo, up, v.kind)

    def add_constraint(self, coeffs: dict, sense: str, rhs, name: str | None = None) -> str:
        if sense not in (LE, EQ, GE):
            raise ValueError(f"unknown sense {sense!r}")
        terms = []
        for var, coef in coeffs.items():
            if var not in self._index:
                raise ValueError(f"constraint references undeclared variable {var!r}")
            coef = _rat(coef)
            if coef != 0:
                terms.append((self._index[var], coef))
        terms.sort()
        if name is None:
            name = f"c{len(self._constraints)}"
        self._constraints.append(_Constraint(name, tuple(terms), sense, _rat(rhs)))
        return name

    def add_objective_term(self, var: str, coef) -> None:
        if var not in self._index:
            raise ValueError(f"objective references undeclared variable {var!r}")
        self._objective[var] = self._objective.get(var, Fraction(0)) + _rat(coef)

    def minimize(self, coeffs: dict) -> None:
        for var, coef in coeffs.items():
            self.add_objective_term(var, coef)

    # -- helpers -----------------------------------------------------------

    @property
    def num_vars(self) -> int:
        return len(self._vars)

    @property
    def num_constraints(self) -> int:
        return len(self._constraints)

    def var_names(self) -> list[str]:
        return [v.name for v in self._vars]

    def objective_value(self, values: dict) -> Fraction:
        return sum((coef * _rat(values[var]) for var, coef in self._objective.items()),
                   Fraction(0))

    def constraint_activity(self, cons: _Constraint, values: list) -> Fraction:
        return sum((coef * values[i] for i, coef in cons.coeffs), Fraction(0))

    def to_lp_text(self) -> str:
        """Model in LP text format, for external cross-checking."""
        def num(q: Fraction) -> str:
            return str(int(q)) if q.denominator == 1 else repr(float(q))

        def terms(pairs) -> str:
            out = []
            for i, coef in pairs:
                sign = "+" if coef >= 0 else "-"
                out.append(f"{sign} {num(abs(coef))} {self._vars[i].name}")
            return " ".join(out) if out else "0"

        lines = ["Minimize", " obj: " + terms(
            sorted((self._index[v], c) for v, c in self._objective.items()))]
        lines.append("Subject To")
        op = {LE: "<=", EQ: "=", GE: ">="}
        for cons in self._constraints:
            lines.append(f" {cons.name}: {terms(cons.coeffs)} {op[cons.sense]} {num(cons.rhs)}")
        lines.append("Bounds")
        for v in self._vars:
            lo = "-inf" if v.lower is None else num(v.lower)
            up = "+inf" if v.upper is None else num(v.upper)
            lines.append(f" {lo} <= {v.name} <= {up}")
        general = [v.name for v in self._vars if v.kind is VarKind.INTEGER]
        binary = [v.name for v in self._vars if v.kind is VarKind.BINARY]
        if general:
            lines.append("General")
            lines.append(" " + " ".join(general))
        if binary:
            lines.append("Binary")
            lines.append(" " + " ".join(binary))
        lines.append("End")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MilpSolution:
    status: SolveStatus
    values: dict
    objective: Fraction | None
    proven_gap: float
    message: str = ""


# -- linearization helpers -------------------------------------------------

def add_abs_deviation(model: MilpModel, expr: dict, bound_var: str,
                      constant=0, name: str | None = None) -> None:
    """Constrain ``|expr + constant| <= bound_var`` via two inequalities."""
    lo = model._vars[model._index[bound_var]].lower
    if lo is None or lo < 0:
        raise ValueError(f"bound variable {bound_var!r} must have lower bound >= 0")
    constant = _rat(constant)
    pos = dict(expr)
    pos[bound_var] = pos.get(bound_var, 0) - 1
    model.add_constraint(pos, LE, -constant,
                         name=None if name is None else f"{name}_pos")
    neg = {var: -_rat(coef) for var, coef in expr.items()}
    neg[bound_var] = neg.get(bound_var, Fraction(0)) - 1
    model.add_constraint(neg, LE, constant,
                         name=None if name is None else f"{name}_neg")


def add_indicator_window(model: MilpModel, h_var: str, x_var: str,
                         w_min, w_max, big_m, name: str | None = None) -> None:
    """When binary ``x_var`` is 1, force ``h_var`` into [w_min, w_max]."""
    x = model._vars[model._index[x_var]]
    if x.kind is not VarKind.BINARY:
        raise ValueError(f"{x_var!r} must be BINARY")
    h_up = model._vars[model._index[h_var]].upper
    need = max(abs(h_up) if h_up is not None else 0, _rat(w_max))
    if _rat(big_m) < need:
        raise BigMTooSmall(f"big-M {big_m} below required {need} for {h_var!r}")
    # h >= w_min - (1 - x) M   and   h <= w_max + (1 - x) M
    model.add_constraint({h_var: 1, x_var: -big_m}, GE, _rat(w_min) - _rat(big_m),
                         name=None if name is None else f"{name}_lo")
    model.add_constraint({h_var: 1, x_var: big_m}, LE, _rat(w_max) + _rat(big_m),
                         name=None if name is None else f"{name}_up")


def default_big_m(total_heads: int, largest_class_upper: int) -> int:
    return total_heads + largest_class_upper + 1


# -- solving ---------------------------------------------------------------

_INF = float("inf")


def solve(model: MilpModel, gap: float = 0.0,
          time_limit: float | None = None) -> MilpSolution:
    """Solve ``model`` to the requested absolute optimality gap.

    Deterministic for a fixed model: single-threaded search with a pinned
    seed, then an exact rational polish of the continuous variables with
    the integers fixed.  Returns INFEASIBLE (with a hint naming a
    single impossible row when one exists) rather than raising.
    """
    if gap < 0:
        raise ValueError("gap must be nonnegative")
    n = model.num_vars
    if n == 0:
        return MilpSolution(SolveStatus.OPTIMAL, {}, Fraction(0), 0.0)

    c = np.zeros(n)
    for var, coef in model._objective.items():
        c[model._index[var]] = float(coef)
    integrality = np.array([0 if v.kind is VarKind.CONTINUOUS else 1
                            for v in model._vars])
    lo = np.array([-_INF if v.lower is None else float(v.lower) for v in model._vars])
    up = np.array([_INF if v.upper is None else float(v.upper) for v in model._vars])

    constraints = []
    if model._constraints:
        data, rows, cols = [], [], []
        clo = np.empty(model.num_constraints)
        cup = np.empty(model.num_constraints)
        for r, cons in enumerate(model._constraints):
            for i, coef in cons.coeffs:
                rows.append(r)
                cols.append(i)
                data.append(float(coef))
            rhs = float(cons.rhs)
            clo[r] = rhs if cons.sense in (EQ, GE) else -_INF
            cup[r] = rhs if cons.sense in (EQ, LE) else _INF
        a = sparse.csc_array((data, (rows, cols)),
                             shape=(model.num_constraints, n))
        constraints = [optimize.LinearConstraint(a, clo, cup)]

    options = {
        "disp": False,
        "presolve": True,
        "mip_rel_gap": 0.0,
        # forwarded verbatim to HiGHS; pinned for determinism
        "mip_abs_gap": float(gap),
        "threads": 1,
        "random_seed": 0,
    }
    if time_limit is not None:
        options["time_limit"] = float(time_limit)

    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Unrecognized options detected",
                                category=RuntimeWarning)
        res = optimize.milp(c, constraints=constraints, integrality=integrality,
                            bounds=optimize.Bounds(lo, up), options=options)

    if res.status == 2:
        return MilpSolution(SolveStatus.INFEASIBLE, {}, None, _INF,
                            message=_infeasible_hint(model))
    if res.status == 3:
        raise SolveError(f"{model.name}: model is unbounded")
    if res.x is None:
        raise SolveError(f"{model.name}: solver returned no incumbent ({res.message})")

    values = _polish(model, res.x)
    objective = model.objective_value(values)
    obj_f = float(objective)

    dual = getattr(res, "mip_dual_bound", None)
    if dual is None or not math.isfinite(dual):
        proven = 0.0 if res.status == 0 else _INF
    else:
        proven = max(0.0, obj_f - float(dual))
    if res.status == 1:
        status = SolveStatus.GAP_NOT_REACHED
    elif proven <= 1e-9 * max(1.0, abs(obj_f)):
        status = SolveStatus.OPTIMAL
        proven = 0.0
    elif proven <= gap + 1e-12:
        status = SolveStatus.FEASIBLE_WITHIN_GAP
    else:
        status = SolveStatus.GAP_NOT_REACHED
    return MilpSolution(status, values, objective, proven, message=res.message or "")


def _polish(model: MilpModel, x: np.ndarray) -> dict:
    """Exact values from a float incumbent: round integers, re-solve the rest.

    With the integers fixed, rows over a single continuous variable fold
    into its bounds; what remains (nothing, for the models built here) goes
    to the exact rational simplex.  The result is validated against every
    row: integer rows exactly, continuous rows exactly in rational
    arithmetic.
    """
    n = model.num_vars
    fixed: list = [None] * n
    for i, v in enumerate(model._vars):
        if v.kind is VarKind.CONTINUOUS:
            continue
        val = int(round(float(x[i])))
        val = max(val, int(math.ceil(v.lower)))
        val = min(val, int(math.floor(v.upper)))
        fixed[i] = val

    cont = [i for i, v in enumerate(model._vars) if v.kind is VarKind.CONTINUOUS]
    lo = {i: model._vars[i].lower for i in cont}
    up = {i: model._vars[i].upper for i in cont}

    # residual rows over continuous variables only
    residual = []
    for cons in model._constraints:
        const = Fraction(0)
        terms = []
        for i, coef in cons.coeffs:
            if fixed[i] is not None:
                const += coef * fixed[i]
            else:
                terms.append((i, coef))
        residual.append((terms, cons.sense, cons.rhs - const, cons))

    def tighten(i, new_lo=None, new_up=None):
        if new_lo is not None and (lo[i] is None or new_lo > lo[i]):
            lo[i] = new_lo
        if new_up is not None and (up[i] is None or new_up < up[i]):
            up[i] = new_up

    pending = residual
    leftovers = []
    changed = True
    while changed:
        changed = False
        next_pending = []
        for terms, sense, rhs, cons in pending:
            live = [(i, coef) for i, coef in terms if lo.get(i) != up.get(i)
                    or lo.get(i) is None]
            const = sum((coef * lo[i] for i, coef in terms
                         if lo.get(i) == up.get(i) and lo.get(i) is not None),
                        Fraction(0))
            rhs = rhs - const
            if not live:
                _check_row(model, cons, sense, rhs, Fraction(0))
                changed = True
                continue
            if len(live) == 1:
                i, a = live[0]
                bound = rhs / a
                if sense == EQ:
                    tighten(i, bound, bound)
                elif (sense == LE) == (a > 0):
                    tighten(i, None, bound)
                else:
                    tighten(i, bound, None)
                changed = True
                continue
            next_pending.append((live, sense, rhs, cons))
        pending = next_pending
        if not changed and pending:
            leftovers = pending
            pending = []

    for i in cont:
        if lo[i] is not None and up[i] is not None and lo[i] > up[i]:
            raise SolveError(
                f"{model.name}: inconsistent continuous bounds for "
                f"{model._vars[i].name} after fixing integers")

    values: list = list(fixed)
    if leftovers:
        free = sorted({i for terms, _, _, _ in leftovers for i, _ in terms})
        rows = []
        for terms, sense, rhs, _ in leftovers:
            coeffs = [Fraction(0)] * len(free)
            for i, coef in terms:
                coeffs[free.index(i)] = coef
            rows.append((coeffs, sense, rhs))
        obj = [model._objective.get(model._vars[i].name, Fraction(0)) for i in free]
        status, sol = simplex.solve_lp_exact(
            obj, rows, [(lo[i], up[i]) for i in free])
        if status != "optimal":
            raise SolveError(f"{model.name}: exact polish found the residual "
                             f"continuous system {status}")
        for i, val in zip(free, sol):
            values[i] = val
    for i in cont:
        if values[i] is not None:
            continue
        coef = model._objective.get(model._vars[i].name, Fraction(0))
        if coef >= 0:
            if lo[i] is not None:
                values[i] = lo[i]
            elif up[i] is not None:
                values[i] = up[i]
            else:
                values[i] = Fraction(0)
        else:
            if up[i] is None:
                raise SolveError(f"{model.name}: continuous variable "
                                 f"{model._vars[i].name} unbounded below objective")
            values[i] = up[i]

    for cons in model._constraints:
        activity = model.constraint_activity(cons, values)
        _check_row(model, cons, cons.sense, cons.rhs, activity)
    for i, v in enumerate(model._vars):
        if (v.lower is not None and values[i] < v.lower) or \
           (v.upper is not None and values[i] > v.upper):
            raise SolveError(f"{model.name}: {v.name} out of bounds after polish")

    out = {}
    for i, v in enumerate(model._vars):
        out[v.name] = values[i] if fixed[i] is None else fixed[i]
    return out


def _check_row(model, cons, sense, rhs, activity):
    ok = (activity == rhs if sense == EQ
          else activity <= rhs if sense == LE
          else activity >= rhs)
    if ok:
        return
    # continuous rows tolerate 1e-9 relative slack; integral rows none
    integral = all(model._vars[i].kind is not VarKind.CONTINUOUS
                   for i, _ in cons.coeffs)
    if not integral:
        viol = abs(float(activity - rhs))
        if viol <= 1e-9 * max(1.0, abs(float(rhs))):
            return
    raise SolveError(f"{model.name}: row {cons.name} violated after polish "
                     f"({float(activity)} vs {sense} {float(rhs)})")


def _infeasible_hint(model: MilpModel) -> str:
    """Name a single row no assignment can satisfy, when one exists."""
    for v in model._vars:
        if v.lower is not None and v.upper is not None and v.lower > v.upper:
            return f"variable {v.name} has empty domain [{v.lower}, {v.upper}]"
    for cons in model._constraints:
        lo = Fraction(0)
        up = Fraction(0)
        unbounded_lo = unbounded_up = False
        for i, coef in cons.coeffs:
            v = model._vars[i]
            a, b = (v.lower, v.upper) if coef > 0 else (v.upper, v.lower)
            if a is None:
                unbounded_lo = True
            else:
                lo += coef * a
            if b is None:
                unbounded_up = True
            else:
                up += coef * b
        if cons.sense in (LE, EQ) and not unbounded_lo and lo > cons.rhs:
            return (f"row {cons.name} cannot be satisfied: minimum activity "
                    f"{float(lo)} exceeds bound {float(cons.rhs)}")
        if cons.sense in (GE, EQ) and not unbounded_up and up < cons.rhs:
            return (f"row {cons.name} cannot be satisfied: maximum activity "
                    f"{float(up)} is below bound {float(cons.rhs)}")
    return "no single-row cause identified; constraint interaction is infeasible"
