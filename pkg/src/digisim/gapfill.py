"""Staged recovery of redacted head counts.

Order matters: state totals are filled from the national total, then
state-by-size rows from each state total, then county totals per state.
Each stage solves, per (livestock, subtype) group, an integer program
that spreads the missing mass while minimizing the largest excess over
the lower bounds, with a lexicographic tie-break.  County-by-size
matrices are completed afterwards by iterative proportional fitting.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from . import milp
from .errors import Infeasible, NegativeResidual, NoConvergence
from .model import (
    COUNTRY_REGION,
    TOTAL_INDEX,
    CountTable,
    Level,
    SizeClassScheme,
    derive_bounds,
    state_of_county,
)


class Stage(str, enum.Enum):
    STATE_TOTAL = "STATE_TOTAL"
    STATE_BY_SIZE = "STATE_BY_SIZE"
    COUNTY_TOTAL = "COUNTY_TOTAL"


@dataclass(frozen=True)
class FillInstance:
    """m unknown integers with box bounds that must sum to T."""

    m: int
    T: int
    bounds: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(tuple(b) for b in self.bounds))
        if self.m != len(self.bounds):
            raise ValueError(f"m={self.m} but {len(self.bounds)} bounds given")
        for lo, up in self.bounds:
            if lo > up:
                raise ValueError(f"inverted bound ({lo}, {up})")


def fill_gaps(instance: FillInstance) -> list[int]:
    """Fill the unknowns so the largest excess over lower bounds is minimal.

    Among all optima the lexicographically smallest vector is returned.
    Raises Infeasible when no assignment within bounds reaches the target.
    """
    if instance.m == 0:
        if instance.T != 0:
            raise Infeasible(f"no unknowns but residual target {instance.T}")
        return []
    sum_lo = sum(lo for lo, _ in instance.bounds)
    sum_up = sum(up for _, up in instance.bounds)
    if not sum_lo <= instance.T <= sum_up:
        raise Infeasible(
            f"target {instance.T} outside achievable range [{sum_lo}, {sum_up}]")

    model = milp.MilpModel("fillgaps")
    names = []
    for i, (lo, up) in enumerate(instance.bounds):
        names.append(model.add_var(f"x{i}", lo, up, milp.VarKind.INTEGER))
    lam = model.add_var("lam0", 0, None)
    model.add_constraint({n: 1 for n in names}, milp.EQ, instance.T, name="sum")
    for i, (lo, _) in enumerate(instance.bounds):
        model.add_constraint({names[i]: 1, lam: -1}, milp.LE, lo, name=f"excess{i}")
    model.minimize({lam: 1})
    sol = milp.solve(model)
    if sol.status is milp.SolveStatus.INFEASIBLE:
        raise Infeasible(sol.message)

    # the optimum excess is a max over integers, hence integral
    lam0 = math.floor(sol.values["lam0"])
    caps = [min(up, lo + lam0) for lo, up in instance.bounds]
    suffix = [0] * (instance.m + 1)
    for i in range(instance.m - 1, -1, -1):
        suffix[i] = suffix[i + 1] + caps[i]
    # greedy: take the least value that leaves the rest achievable
    xs = []
    rem = instance.T
    for i, (lo, _) in enumerate(instance.bounds):
        x = max(lo, rem - suffix[i + 1])
        xs.append(x)
        rem -= x
    assert rem == 0 and all(lo <= x <= c for x, (lo, _), c
                            in zip(xs, instance.bounds, caps))
    return xs


@dataclass(frozen=True)
class FillReportRow:
    group: str
    stage: Stage
    unknowns: int
    T: int
    lambda0: int
    status: str


def fill_stage(tables: list[CountTable], stage: Stage,
               schemes: dict[str, SizeClassScheme],
               report: list | None = None) -> list[CountTable]:
    """Replace the MISSING heads belonging to ``stage`` across all tables.

    Tables not touched by the stage pass through unchanged; running a
    stage twice is a no-op the second time.  Raises Infeasible with the
    offending group attached when a group cannot be filled.
    """
    tables = list(tables)
    groups = sorted({t.group for t in tables})
    for livestock, subtype in groups:
        idx = [i for i, t in enumerate(tables) if t.group == (livestock, subtype)]
        gid = f"{livestock}/{subtype}"
        scheme = schemes[livestock]
        if stage is Stage.STATE_TOTAL:
            _fill_state_totals(tables, idx, scheme, gid, report)
        elif stage is Stage.STATE_BY_SIZE:
            _fill_state_by_size(tables, idx, scheme, gid, report)
        elif stage is Stage.COUNTY_TOTAL:
            _fill_county_totals(tables, idx, scheme, gid, report)
        else:
            raise ValueError(f"unknown stage {stage!r}")
    return tables


def _children_of(tables, idx, parent: CountTable) -> tuple[CountTable, ...]:
    """Tables one admin level below ``parent`` within its region."""
    if parent.region == COUNTRY_REGION:
        return tuple(tables[i] for i in idx
                     if tables[i].level is Level.STATE
                     and tables[i].region != COUNTRY_REGION)
    return tuple(tables[i] for i in idx
                 if tables[i].level is Level.COUNTY
                 and state_of_county(tables[i].region) == parent.region)


def _report(report, gid, stage, unknowns, target, xs, bounds):
    if report is None:
        return
    lam0 = max((x - lo for x, (lo, _) in zip(xs, bounds)), default=0)
    report.append(FillReportRow(gid, stage, unknowns, target, lam0, "filled"))


def _fill_state_totals(tables, idx, scheme, gid, report):
    members = [i for i in idx if tables[i].level is Level.STATE
               and tables[i].region != COUNTRY_REGION]
    members.sort(key=lambda i: tables[i].region)
    unknown = [i for i in members if tables[i].total.heads is None]
    if not unknown:
        return
    country = next((i for i in idx if tables[i].level is Level.STATE
                    and tables[i].region == COUNTRY_REGION), None)
    if country is None or tables[country].total.heads is None:
        raise Infeasible("country total unavailable", group=gid)
    enclosing = tables[country].total.heads
    target = enclosing - sum(tables[i].total.heads for i in members
                             if tables[i].total.heads is not None)
    bounds = []
    for i in unknown:
        t = tables[i]
        refine = _children_of(tables, idx, t)
        try:
            b = derive_bounds(t, scheme, refining_tables=refine,
                              enclosing_total=enclosing)
        except ValueError as exc:
            raise Infeasible(str(exc), group=gid) from exc
        bounds.append(b[TOTAL_INDEX])
    xs = _run(gid, len(unknown), target, bounds)
    for i, x in zip(unknown, xs):
        tables[i] = tables[i].with_heads(TOTAL_INDEX, x)
    _report(report, gid, Stage.STATE_TOTAL, len(unknown), target, xs, bounds)


def _fill_state_by_size(tables, idx, scheme, gid, report):
    for i in sorted((i for i in idx if tables[i].level is Level.STATE),
                    key=lambda i: tables[i].region):
        t = tables[i]
        missing = t.missing_class_heads()
        if not missing:
            continue
        if t.total.heads is None:
            raise Infeasible(f"state {t.region} total still missing",
                             group=f"{gid}/{t.region}")
        target = t.total.heads - t.known_class_sum()
        refine = _children_of(tables, idx, t)
        b = derive_bounds(t, scheme, refining_tables=refine,
                          enclosing_total=t.total.heads)
        try:
            bounds = [b[c] for c in missing]
        except KeyError as exc:
            raise Infeasible(f"class {exc.args[0]} lacks a farm count",
                             group=f"{gid}/{t.region}") from exc
        xs = _run(f"{gid}/{t.region}", len(missing), target, bounds)
        for c, x in zip(missing, xs):
            t = t.with_heads(c, x)
        tables[i] = t
        _report(report, f"{gid}/{t.region}", Stage.STATE_BY_SIZE,
                len(missing), target, xs, bounds)


def _fill_county_totals(tables, idx, scheme, gid, report):
    states = sorted({state_of_county(tables[i].region) for i in idx
                     if tables[i].level is Level.COUNTY})
    for st in states:
        members = sorted((i for i in idx if tables[i].level is Level.COUNTY
                          and state_of_county(tables[i].region) == st),
                         key=lambda i: tables[i].region)
        unknown = [i for i in members if tables[i].total.heads is None]
        if not unknown:
            continue
        parent = next((i for i in idx if tables[i].level is Level.STATE
                       and tables[i].region == st), None)
        if parent is None or tables[parent].total.heads is None:
            raise Infeasible(f"state {st} total unavailable", group=f"{gid}/{st}")
        enclosing = tables[parent].total.heads
        target = enclosing - sum(tables[i].total.heads for i in members
                                 if tables[i].total.heads is not None)
        bounds = []
        for i in unknown:
            try:
                b = derive_bounds(tables[i], scheme, enclosing_total=enclosing)
            except ValueError as exc:
                raise Infeasible(str(exc), group=f"{gid}/{st}") from exc
            bounds.append(b[TOTAL_INDEX])
        xs = _run(f"{gid}/{st}", len(unknown), target, bounds)
        for i, x in zip(unknown, xs):
            tables[i] = tables[i].with_heads(TOTAL_INDEX, x)
        _report(report, f"{gid}/{st}", Stage.COUNTY_TOTAL,
                len(unknown), target, xs, bounds)


def _run(gid, m, target, bounds):
    try:
        return fill_gaps(FillInstance(m, target, tuple(bounds)))
    except Infeasible as exc:
        raise Infeasible(str(exc), group=gid) from exc


# -- iterative proportional fitting ---------------------------------------

@dataclass(frozen=True)
class IpfCell:
    value: float
    known: bool


@dataclass(frozen=True)
class IpfMatrix:
    """Counties x size classes with fixed KNOWN cells and scalable seeds."""

    rows: tuple[str, ...]
    cols: tuple[int, ...]
    cells: tuple[tuple[IpfCell, ...], ...]
    row_totals: tuple[int, ...]
    col_totals: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "cols", tuple(self.cols))
        object.__setattr__(self, "cells", tuple(tuple(r) for r in self.cells))
        object.__setattr__(self, "row_totals", tuple(self.row_totals))
        object.__setattr__(self, "col_totals", tuple(self.col_totals))
        if len(self.cells) != len(self.rows):
            raise ValueError("cell row count does not match row labels")
        for r in self.cells:
            if len(r) != len(self.cols):
                raise ValueError("cell column count does not match column labels")
        if len(self.row_totals) != len(self.rows) or \
           len(self.col_totals) != len(self.cols):
            raise ValueError("marginal lengths do not match matrix shape")

    def values(self) -> list[list[float]]:
        return [[c.value for c in row] for row in self.cells]


def ipf_converge(matrix: IpfMatrix, tol: float = 1e-6,
                 max_iter: int = 10000):
    """Scale SEEDED cells to the residual marginals; KNOWN cells stay fixed.

    Returns (values, converged, diagnostics) where values is the full
    real-valued matrix after the final sweep.
    """
    nr, nc = len(matrix.rows), len(matrix.cols)
    known_row = [sum(c.value for c in row if c.known) for row in matrix.cells]
    known_col = [sum(matrix.cells[r][c].value for r in range(nr)
                     if matrix.cells[r][c].known) for c in range(nc)]
    rres = [matrix.row_totals[r] - known_row[r] for r in range(nr)]
    cres = [matrix.col_totals[c] - known_col[c] for c in range(nc)]
    for r, v in enumerate(rres):
        if v < -1e-9:
            raise NegativeResidual(
                f"row {matrix.rows[r]}: known cells exceed total by {-v}")
    for c, v in enumerate(cres):
        if v < -1e-9:
            raise NegativeResidual(
                f"column {matrix.cols[c]}: known cells exceed total by {-v}")

    vals = [[(0.0 if cell.known else cell.value) for cell in row]
            for row in matrix.cells]
    seeded = [[not cell.known for cell in row] for row in matrix.cells]

    def marginal_errors():
        row_err = 0.0
        for r in range(nr):
            s = known_row[r] + sum(vals[r][c] for c in range(nc) if seeded[r][c])
            row_err = max(row_err,
                          abs(s - matrix.row_totals[r]) / max(1, matrix.row_totals[r]))
        col_err = 0.0
        for c in range(nc):
            s = known_col[c] + sum(vals[r][c] for r in range(nr) if seeded[r][c])
            col_err = max(col_err,
                          abs(s - matrix.col_totals[c]) / max(1, matrix.col_totals[c]))
        return row_err, col_err

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for r in range(nr):
            s = sum(vals[r][c] for c in range(nc) if seeded[r][c])
            if s > 0:
                f = rres[r] / s
                for c in range(nc):
                    if seeded[r][c]:
                        vals[r][c] *= f
        for c in range(nc):
            s = sum(vals[r][c] for r in range(nr) if seeded[r][c])
            if s > 0:
                f = cres[c] / s
                for r in range(nr):
                    if seeded[r][c]:
                        vals[r][c] *= f
        row_err, col_err = marginal_errors()
        if row_err <= tol and col_err <= tol:
            converged = True
            break

    row_err, col_err = marginal_errors()
    full = [[(matrix.cells[r][c].value if matrix.cells[r][c].known else vals[r][c])
             for c in range(nc)] for r in range(nr)]
    diagnostics = {"iterations": iterations, "max_row_error": row_err,
                   "max_col_error": col_err, "tol": tol}
    return full, converged, diagnostics


def ipf_fill(matrix: IpfMatrix, tol: float = 1e-6,
             max_iter: int = 10000) -> IpfMatrix:
    """Complete the matrix with integers: IPF, round per row, repair columns.

    Row sums match row totals exactly after rounding; a single sweep then
    moves ±1 between columns of the same row (SEEDED cells only) to fix
    what column drift it can.  Raises NoConvergence (carrying the best
    rounded iterate and diagnostics) when marginals cannot be matched.
    """
    vals, converged, diagnostics = ipf_converge(matrix, tol, max_iter)
    rounded = _round_and_repair(matrix, vals)
    if not converged:
        raise NoConvergence(
            f"IPF did not reach tol={tol} after {diagnostics['iterations']} "
            f"iterations (row err {diagnostics['max_row_error']:.3g}, "
            f"col err {diagnostics['max_col_error']:.3g})",
            best=rounded, diagnostics=diagnostics)
    return rounded


def _round_and_repair(matrix: IpfMatrix, vals) -> IpfMatrix:
    nr, nc = len(matrix.rows), len(matrix.cols)
    out = [[0] * nc for _ in range(nr)]
    for r in range(nr):
        for c in range(nc):
            if matrix.cells[r][c].known:
                out[r][c] = int(round(matrix.cells[r][c].value))

    # largest-remainder per row over the seeded cells; rows come out exact
    for r in range(nr):
        cols = [c for c in range(nc) if not matrix.cells[r][c].known]
        target = matrix.row_totals[r] - sum(out[r][c] for c in range(nc)
                                            if matrix.cells[r][c].known)
        if not cols:
            continue
        floors = {c: int(math.floor(vals[r][c])) for c in cols}
        delta = target - sum(floors.values())
        for c in cols:
            out[r][c] = floors[c]
        if delta > 0:
            order = sorted(cols, key=lambda c: (-(vals[r][c] - floors[c]), c))
            k = 0
            while delta > 0:
                out[r][order[k % len(order)]] += 1
                delta -= 1
                k += 1
        elif delta < 0:
            order = sorted(cols, key=lambda c: (vals[r][c] - floors[c], c))
            k = 0
            guard = 0
            while delta < 0 and guard < 10 * nc * max(1, -delta):
                c = order[k % len(order)]
                if out[r][c] > 0:
                    out[r][c] -= 1
                    delta += 1
                k += 1
                guard += 1

    # one repair sweep: shift units between a surplus and a deficit column
    # inside the same row, so row sums stay exact
    col_delta = [sum(out[r][c] for r in range(nr)) - matrix.col_totals[c]
                 for c in range(nc)]
    for cs in range(nc):
        if col_delta[cs] <= 0:
            continue
        for cd in range(nc):
            if col_delta[cd] >= 0:
                continue
            for r in range(nr):
                while (col_delta[cs] > 0 and col_delta[cd] < 0
                       and not matrix.cells[r][cs].known
                       and not matrix.cells[r][cd].known
                       and out[r][cs] > 0):
                    out[r][cs] -= 1
                    out[r][cd] += 1
                    col_delta[cs] -= 1
                    col_delta[cd] += 1
                if col_delta[cs] == 0:
                    break
            if col_delta[cs] == 0:
                break

    cells = tuple(tuple(IpfCell(float(out[r][c]), matrix.cells[r][c].known)
                        for c in range(nc)) for r in range(nr))
    return IpfMatrix(matrix.rows, matrix.cols, cells,
                     matrix.row_totals, matrix.col_totals)
