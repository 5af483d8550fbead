"""Assignment of generated farms to county grid cells.

Each farm lands in exactly one cell of its county; the worst per-cell
absolute difference between assigned heads and the gridded abundance
layer is minimized.  Small instances get a lexicographic tie-break by
(farm id, cell id) via exhaustive refinement; larger ones rely on the
deterministic single-threaded solve.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

from . import milp
from .errors import NoCells
from .milp import MilpModel, SolveStatus, VarKind, add_abs_deviation
from .model import FarmRecord

#: Largest assignment-space size still refined by enumeration.
ENUMERATION_LIMIT = 20000


@dataclass(frozen=True)
class AssignInstance:
    """Farms of one (county, livestock) and the candidate grid cells."""

    county: str
    livestock: str
    farms: tuple[FarmRecord, ...]
    cells: tuple[tuple[int, int], ...]
    capacity: dict[tuple[int, int], float]
    gap: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "farms",
                           tuple(sorted(self.farms, key=lambda f: f.id)))
        object.__setattr__(self, "cells", tuple(sorted(self.cells)))
        if not self.farms:
            raise ValueError("instance needs at least one farm")
        for cell in self.cells:
            if self.capacity.get(cell, 0.0) < 0:
                raise ValueError(f"negative capacity at {cell}")

    @property
    def total_heads(self) -> int:
        return sum(f.total_heads for f in self.farms)

    @property
    def resolved_gap(self) -> float:
        return self.gap if self.gap is not None else 0.0001 * self.total_heads


@dataclass(frozen=True)
class AssignResult:
    instance: AssignInstance
    assignment: dict[str, tuple[int, int]]
    lambda5: Fraction
    status: SolveStatus
    proven_gap: float


def _avar(fi: int, ci: int) -> str:
    return f"a_{fi}_{ci}"


def assign_farms_to_cells(instance: AssignInstance,
                          time_limit: float | None = None) -> AssignResult:
    """Solve the placement program for one county and livestock type.

    Raises NoCells when the instance has no candidate cells; the caller
    decides the fallback.
    """
    if not instance.cells:
        raise NoCells(f"{instance.county}/{instance.livestock}: "
                      "no grid cells carry the livestock layer")
    farms = instance.farms
    cells = instance.cells

    model = MilpModel(f"assign_{instance.county}_{instance.livestock}")
    for fi in range(len(farms)):
        for ci in range(len(cells)):
            model.add_var(_avar(fi, ci), kind=VarKind.BINARY)
        model.add_constraint({_avar(fi, ci): 1 for ci in range(len(cells))},
                             milp.EQ, 1, name=f"one_{fi}")
    lam = model.add_var("lambda5", 0, None)
    for ci, cell in enumerate(cells):
        load = {_avar(fi, ci): farms[fi].total_heads
                for fi in range(len(farms))}
        add_abs_deviation(model, load, lam,
                          constant=-instance.capacity.get(cell, 0.0),
                          name=f"cell_{ci}")
    model.minimize({lam: 1})

    sol = milp.solve(model, gap=instance.resolved_gap, time_limit=time_limit)
    if sol.status is SolveStatus.INFEASIBLE:
        # structurally impossible: every farm can always take some cell
        raise NoCells(f"{instance.county}/{instance.livestock}: {sol.message}")

    chosen = []
    for fi in range(len(farms)):
        chosen.append(next(ci for ci in range(len(cells))
                           if sol.values[_avar(fi, ci)] == 1))
    achieved = Fraction(sol.values["lambda5"])

    if len(cells) ** len(farms) <= ENUMERATION_LIMIT:
        chosen = _lexicographic_refinement(instance, achieved)

    assignment = {farms[fi].id: cells[ci] for fi, ci in enumerate(chosen)}
    return AssignResult(instance, assignment,
                        lambda5=_max_deviation(instance, assignment),
                        status=sol.status, proven_gap=sol.proven_gap)


def _lexicographic_refinement(instance: AssignInstance,
                              achieved: Fraction) -> list[int]:
    """First assignment in (farm id, cell id) order whose deviation does
    not exceed the solved objective; one always exists."""
    caps = [Fraction(instance.capacity.get(c, 0.0)) for c in instance.cells]
    heads = [f.total_heads for f in instance.farms]
    for combo in itertools.product(range(len(instance.cells)),
                                   repeat=len(instance.farms)):
        load = [Fraction(0)] * len(instance.cells)
        for fi, ci in enumerate(combo):
            load[ci] += heads[fi]
        dev = max(abs(l - q) for l, q in zip(load, caps))
        if dev <= achieved:
            return list(combo)
    raise AssertionError("solver objective unreachable by enumeration")


def cell_loads(instance: AssignInstance,
               assignment: dict[str, tuple[int, int]]) -> dict[tuple[int, int], int]:
    loads = {cell: 0 for cell in instance.cells}
    for farm in instance.farms:
        loads[assignment[farm.id]] += farm.total_heads
    return loads


def _max_deviation(instance, assignment) -> Fraction:
    loads = cell_loads(instance, assignment)
    return max(abs(Fraction(loads[c]) - Fraction(instance.capacity.get(c, 0.0)))
               for c in instance.cells)


def rescaled_lambda5(instance: AssignInstance,
                     assignment: dict[str, tuple[int, int]]) -> float | None:
    """Deviation against capacities rescaled so their sum matches the
    assigned total; None when the layer is all zero in the county."""
    total_q = sum(instance.capacity.get(c, 0.0) for c in instance.cells)
    if total_q <= 0:
        return None
    scale = instance.total_heads / total_q
    loads = cell_loads(instance, assignment)
    return max(abs(loads[c] - instance.capacity.get(c, 0.0) * scale)
               for c in instance.cells)


def alignment_stats(instance: AssignInstance,
                    assignment: dict[str, tuple[int, int]]):
    """(max deviation, Pearson r) of assigned heads against the layer.

    r is None when either vector is constant across the county's cells.
    """
    if not assignment:
        raise ValueError("assignment is empty")
    loads = cell_loads(instance, assignment)
    a = [float(loads[c]) for c in instance.cells]
    q = [instance.capacity.get(c, 0.0) for c in instance.cells]
    lam5 = max(abs(x - y) for x, y in zip(a, q))
    n = len(a)
    mean_a = sum(a) / n
    mean_q = sum(q) / n
    var_a = sum((x - mean_a) ** 2 for x in a)
    var_q = sum((y - mean_q) ** 2 for y in q)
    if var_a == 0 or var_q == 0:
        return lam5, None
    cov = sum((x - mean_a) * (y - mean_q) for x, y in zip(a, q))
    return lam5, cov / math.sqrt(var_a * var_q)
