"""Farm-level synthesis for one county and livestock type.

Realizes county-by-farm-size head and farm counts as individual farm
records with per-subtype head counts.  Farm counts per class are hard
constraints; head-count targets, subtype window counts, per-farm subtype
spread, and within-class equity are soft, weighted so that later terms
dominate earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from . import milp
from .errors import ConsistencyError, Infeasible
from .milp import MilpModel, SolveStatus, VarKind, add_abs_deviation, add_indicator_window
from .model import FarmRecord, SizeClassScheme, resolve_open_cap


def objective_weights(total_heads: int, n_subtypes: int):
    """Penalty weights (lambda1, lambda2, sum-lambda3, lambda4 coefficients)."""
    h1 = total_heads + 1
    g1 = n_subtypes + 1
    return (1, h1, g1 * h1, g1 * h1 * h1)


@dataclass(frozen=True)
class GenFarmsInstance:
    """County-by-size targets for one livestock type.

    ``class_farms``/``class_heads`` hold F_i and H_i per class index;
    ``subtype_farms``/``subtype_heads`` hold F_gk and H_gk keyed by
    (subtype, class index), with absent keys meaning zero.  Subtype farm
    counts are allowed to disagree with class farm counts; the soft terms
    absorb the tension.
    """

    county: str
    livestock: str
    scheme: SizeClassScheme
    class_farms: dict[int, int]
    class_heads: dict[int, int]
    subtypes: tuple[str, ...]
    subtype_farms: dict[tuple[str, int], int] = field(default_factory=dict)
    subtype_heads: dict[tuple[str, int], int] = field(default_factory=dict)
    big_m: int | None = None
    gap: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "subtypes", tuple(self.subtypes))
        n = len(self.scheme)
        for key, label in ((self.class_farms, "class_farms"),
                           (self.class_heads, "class_heads")):
            for i, v in key.items():
                if not 0 <= i < n:
                    raise ValueError(f"{label} index {i} outside scheme")
                if v < 0:
                    raise ValueError(f"{label}[{i}] negative")
        for d, label in ((self.subtype_farms, "subtype_farms"),
                         (self.subtype_heads, "subtype_heads")):
            for (g, k), v in d.items():
                if g not in self.subtypes:
                    raise ValueError(f"{label} references unknown subtype {g!r}")
                if not 0 <= k < n or v < 0:
                    raise ValueError(f"{label}[{g},{k}] invalid")

    @property
    def total_heads(self) -> int:
        return sum(self.class_heads.values())

    @property
    def total_farms(self) -> int:
        return sum(self.class_farms.values())

    def farms_in(self, i: int) -> int:
        return self.class_farms.get(i, 0)

    def heads_in(self, i: int) -> int:
        return self.class_heads.get(i, 0)

    def class_cap(self, i: int) -> int:
        """Resolved per-farm head ceiling for class ``i``."""
        cls = self.scheme.classes[i]
        if cls.is_open:
            return resolve_open_cap(cls.w_min, self.farms_in(i), self.total_heads)
        return cls.w_max

    @property
    def resolved_gap(self) -> float:
        return self.gap if self.gap is not None else 0.001 * self.total_heads

    @property
    def resolved_big_m(self) -> int:
        if self.big_m is not None:
            return self.big_m
        largest = max((self.class_cap(i) for i in range(len(self.scheme))),
                      default=0)
        return milp.default_big_m(self.total_heads, largest)


@dataclass(frozen=True)
class GenFarmsSolution:
    instance: GenFarmsInstance
    farms: tuple[FarmRecord, ...]
    lambda1: Fraction
    lambda2: Fraction
    lambda3: dict[int, Fraction]
    lambda4: Fraction
    objective: Fraction
    status: SolveStatus
    softened: bool = False
    proven_gap: float = 0.0


def _hvar(i, f, g):
    return f"h_{i}_{f}_{g}"


def _xvar(i, f, g, k):
    return f"x_{i}_{f}_{g}_{k}"


def _yvar(i, f, g):
    return f"y_{i}_{f}_{g}"


def _zvar(i, f, g, k):
    return f"z_{i}_{f}_{g}_{k}"


def build_model(instance: GenFarmsInstance, soften: bool = False) -> MilpModel:
    """Assemble the farm-generation program; ``soften`` turns the hard
    per-(subtype, class) farm-count equalities into deviations charged to
    the same penalty as the subtype head deviations."""
    scheme = instance.scheme
    nk = len(scheme)
    big_m = instance.resolved_big_m
    total = instance.total_heads
    w_l1, w_l2, w_l3, w_l4 = objective_weights(total, len(instance.subtypes))

    model = MilpModel(f"genfarms_{instance.county}_{instance.livestock}")
    lam1 = model.add_var("lambda1", 0, None)
    lam2 = model.add_var("lambda2", 0, None)
    lam4 = model.add_var("lambda4", 0, None)
    lam3 = {}

    classes = [i for i in range(nk) if instance.farms_in(i) > 0]
    for i in classes:
        lam3[i] = model.add_var(f"lambda3_{i}", 0, None)
        cap = instance.class_cap(i)
        for f in range(instance.farms_in(i)):
            for g in instance.subtypes:
                model.add_var(_hvar(i, f, g), 0, cap, VarKind.INTEGER)
                model.add_var(_yvar(i, f, g), kind=VarKind.BINARY)
                for k in range(nk):
                    model.add_var(_xvar(i, f, g, k), kind=VarKind.BINARY)
                    model.add_var(_zvar(i, f, g, k), 0, cap, VarKind.INTEGER)

    for i in classes:
        cls = scheme.classes[i]
        cap = instance.class_cap(i)
        a_i = Fraction(instance.heads_in(i), instance.farms_in(i))
        for f in range(instance.farms_in(i)):
            farm_total = {_hvar(i, f, g): 1 for g in instance.subtypes}
            model.add_constraint(farm_total, milp.GE, cls.w_min,
                                 name=f"win_lo_{i}_{f}")
            model.add_constraint(farm_total, milp.LE, cap,
                                 name=f"win_up_{i}_{f}")
            # equity: farm totals stay close to the class average
            add_abs_deviation(model, farm_total, lam3[i], constant=-a_i,
                              name=f"equity_{i}_{f}")
            # at most lambda2 active subtype windows on any single farm
            spread = {_xvar(i, f, g, k): 1
                      for g in instance.subtypes for k in range(nk)}
            spread[lam2] = -1
            model.add_constraint(spread, milp.LE, 0, name=f"spread_{i}_{f}")
            for g in instance.subtypes:
                h = _hvar(i, f, g)
                y = _yvar(i, f, g)
                # y marks an absent subtype: h = 0 iff y = 1
                model.add_constraint({h: 1, y: 1}, milp.GE, 1,
                                     name=f"zero_lo_{i}_{f}_{g}")
                model.add_constraint({h: 1, y: big_m}, milp.LE, big_m,
                                     name=f"zero_up_{i}_{f}_{g}")
                one_of = {_xvar(i, f, g, k): 1 for k in range(nk)}
                one_of[y] = 1
                model.add_constraint(one_of, milp.EQ, 1,
                                     name=f"window_pick_{i}_{f}_{g}")
                for k in range(nk):
                    x = _xvar(i, f, g, k)
                    z = _zvar(i, f, g, k)
                    kcls = scheme.classes[k]
                    k_up = kcls.w_max if kcls.w_max is not None else cap
                    add_indicator_window(model, h, x, kcls.w_min, k_up, big_m,
                                         name=f"ind_{i}_{f}_{g}_{k}")
                    # z = h when the window is active, else 0
                    model.add_constraint({z: 1, h: -1}, milp.LE, 0,
                                         name=f"zlink_a_{i}_{f}_{g}_{k}")
                    model.add_constraint({z: 1, x: -big_m}, milp.LE, 0,
                                         name=f"zlink_b_{i}_{f}_{g}_{k}")
                    model.add_constraint({z: 1, h: -1, x: -big_m}, milp.GE,
                                         -big_m, name=f"zlink_c_{i}_{f}_{g}_{k}")

        class_sum = {_hvar(i, f, g): 1 for f in range(instance.farms_in(i))
                     for g in instance.subtypes}
        add_abs_deviation(model, class_sum, lam1,
                          constant=-instance.heads_in(i), name=f"heads_{i}")
    for i in range(nk):
        # a class with heads but no farms still charges its miss to lambda1
        if instance.farms_in(i) == 0 and instance.heads_in(i) > 0:
            add_abs_deviation(model, {}, lam1, constant=-instance.heads_in(i),
                              name=f"heads_{i}")

    for g in instance.subtypes:
        for k in range(nk):
            x_sum = {_xvar(i, f, g, k): 1 for i in classes
                     for f in range(instance.farms_in(i))}
            f_gk = instance.subtype_farms.get((g, k), 0)
            if soften:
                add_abs_deviation(model, x_sum, lam4, constant=-f_gk,
                                  name=f"subcount_{g}_{k}")
            else:
                model.add_constraint(x_sum, milp.EQ, f_gk,
                                     name=f"subcount_{g}_{k}")
            z_sum = {_zvar(i, f, g, k): 1 for i in classes
                     for f in range(instance.farms_in(i))}
            add_abs_deviation(model, z_sum, lam4,
                              constant=-instance.subtype_heads.get((g, k), 0),
                              name=f"subheads_{g}_{k}")

    model.minimize({lam1: w_l1, lam2: w_l2, lam4: w_l4})
    for i in classes:
        model.add_objective_term(lam3[i], w_l3)
    return model


def gen_farms(instance: GenFarmsInstance,
              time_limit: float | None = None) -> GenFarmsSolution:
    """Solve the farm-generation program for one county.

    Retries once with the subtype farm-count equalities softened when the
    hard form is infeasible; raises Infeasible when even the softened
    form has no solution.
    """
    if instance.total_farms == 0:
        return GenFarmsSolution(instance, (), Fraction(0), Fraction(0), {},
                                Fraction(0), Fraction(0), SolveStatus.OPTIMAL)
    if instance.total_heads == 0:
        raise Infeasible(
            f"{instance.county}/{instance.livestock}: {instance.total_farms} "
            "farms but zero heads; every farm needs at least its class minimum",
            group=f"{instance.county}/{instance.livestock}")

    softened = False
    sol = milp.solve(build_model(instance), gap=instance.resolved_gap,
                     time_limit=time_limit)
    if sol.status is SolveStatus.INFEASIBLE:
        softened = True
        sol = milp.solve(build_model(instance, soften=True),
                         gap=instance.resolved_gap, time_limit=time_limit)
    if sol.status is SolveStatus.INFEASIBLE:
        raise Infeasible(
            f"{instance.county}/{instance.livestock}: no farm configuration "
            f"fits the class windows ({sol.message})",
            group=f"{instance.county}/{instance.livestock}")

    farms = _extract_farms(instance, sol.values)
    lam3 = {i: sol.values[f"lambda3_{i}"]
            for i in range(len(instance.scheme)) if instance.farms_in(i) > 0}
    return GenFarmsSolution(
        instance, farms,
        lambda1=Fraction(sol.values["lambda1"]),
        lambda2=Fraction(sol.values["lambda2"]),
        lambda3={i: Fraction(v) for i, v in lam3.items()},
        lambda4=Fraction(sol.values["lambda4"]),
        objective=sol.objective,
        status=sol.status,
        softened=softened,
        proven_gap=sol.proven_gap,
    )


def _extract_farms(instance: GenFarmsInstance, values) -> tuple[FarmRecord, ...]:
    raw = []
    for i in range(len(instance.scheme)):
        for f in range(instance.farms_in(i)):
            heads = {}
            for g in instance.subtypes:
                v = int(values[_hvar(i, f, g)])
                if v:
                    heads[g] = v
            raw.append((i, heads))
    # interchangeable within a class: canonical order, then stable ids
    def key(item):
        i, heads = item
        vector = tuple(heads.get(g, 0) for g in instance.subtypes)
        return (i, -sum(vector), vector)

    raw.sort(key=key)
    farms = []
    for n, (i, heads) in enumerate(raw, start=1):
        farms.append(FarmRecord(
            id=f"{instance.county}-{instance.livestock}-{n:05d}",
            county=instance.county, livestock=instance.livestock,
            size_class=i, heads_by_subtype=heads))
    return tuple(farms)


def recompute_stats(solution: GenFarmsSolution):
    """Lambda statistics derived from the farm list alone."""
    inst = solution.instance
    scheme = inst.scheme
    lam1 = Fraction(0)
    lam3 = {}
    for i in range(len(scheme)):
        if inst.farms_in(i) == 0 and inst.heads_in(i) == 0:
            continue
        members = [f for f in solution.farms if f.size_class == i]
        got = sum(f.total_heads for f in members)
        lam1 = max(lam1, Fraction(abs(got - inst.heads_in(i))))
        if inst.farms_in(i) > 0:
            a_i = Fraction(inst.heads_in(i), inst.farms_in(i))
            lam3[i] = max((abs(Fraction(f.total_heads) - a_i) for f in members),
                          default=Fraction(0))
    lam2 = max((Fraction(len(f.heads_by_subtype)) for f in solution.farms),
               default=Fraction(0))

    got_heads = {}
    got_counts = {}
    for f in solution.farms:
        for g, h in f.heads_by_subtype.items():
            k = scheme.class_of(h)
            if k is None:
                raise ConsistencyError(
                    f"farm {f.id}: {g} holding {h} falls in no size window")
            got_heads[(g, k)] = got_heads.get((g, k), 0) + h
            got_counts[(g, k)] = got_counts.get((g, k), 0) + 1
    lam4 = Fraction(0)
    for g in inst.subtypes:
        for k in range(len(scheme)):
            dev = abs(got_heads.get((g, k), 0) - inst.subtype_heads.get((g, k), 0))
            lam4 = max(lam4, Fraction(dev))
            if solution.softened:
                cdev = abs(got_counts.get((g, k), 0)
                           - inst.subtype_farms.get((g, k), 0))
                lam4 = max(lam4, Fraction(cdev))
    return lam1, lam2, lam3, lam4


def objective_report(solution: GenFarmsSolution) -> dict:
    """Recompute every lambda from the farms; mismatch with the solver's
    values is an internal error, not a data error."""
    lam1, lam2, lam3, lam4 = recompute_stats(solution)
    mismatches = []
    if lam1 != solution.lambda1:
        mismatches.append(f"lambda1 {solution.lambda1} != {lam1}")
    if lam2 != solution.lambda2:
        mismatches.append(f"lambda2 {solution.lambda2} != {lam2}")
    if lam4 != solution.lambda4:
        mismatches.append(f"lambda4 {solution.lambda4} != {lam4}")
    for i, v in lam3.items():
        if solution.lambda3.get(i) != v:
            mismatches.append(f"lambda3_{i} {solution.lambda3.get(i)} != {v}")
    if mismatches:
        raise ConsistencyError("; ".join(mismatches))
    report = {"lambda1": lam1, "lambda2": lam2, "lambda4": lam4}
    for i in sorted(lam3):
        report[f"lambda3_{i}"] = lam3[i]
    return report
