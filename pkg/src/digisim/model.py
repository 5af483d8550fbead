"""Shared domain types: size-class schemes, count tables, grid geometry, farms.

Missing head counts are represented as ``None`` throughout.  All types are
immutable value objects; dictionaries they hold are never mutated after
construction, so instances are safe to share across parallel workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .errors import (
    CoordinateOutOfRange,
    InconsistentBounds,
    StateClassStraddlesCountyClass,
)

#: Reserved subtype id meaning "the whole livestock type".
ALL_SUBTYPE = "all"

#: Reserved region code for the national aggregate (stored at STATE level).
COUNTRY_REGION = "US"

#: Class index used for table totals in files and bound maps.
TOTAL_INDEX = -1


class Level(str, enum.Enum):
    STATE = "STATE"
    COUNTY = "COUNTY"


def state_of_county(county_fips: str) -> str:
    """State FIPS prefix of a zero-padded 5-digit county FIPS."""
    return county_fips[:2]


@dataclass(frozen=True)
class SizeClass:
    """A farm-size window [w_min, w_max]; ``w_max=None`` marks the open top class."""

    w_min: int
    w_max: int | None

    def __post_init__(self):
        if self.w_min < 1:
            raise ValueError(f"size class lower bound must be >= 1, got {self.w_min}")
        if self.w_max is not None and self.w_max < self.w_min:
            raise ValueError(f"size class window inverted: ({self.w_min}, {self.w_max})")

    @property
    def is_open(self) -> bool:
        return self.w_max is None

    def contains(self, heads: int) -> bool:
        return heads >= self.w_min and (self.w_max is None or heads <= self.w_max)


@dataclass(frozen=True)
class SizeClassScheme:
    """Ordered, pairwise-disjoint farm-size windows for one livestock type."""

    livestock: str
    classes: tuple[SizeClass, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        prev_max = 0
        for i, cls in enumerate(self.classes):
            if cls.w_min <= prev_max:
                raise ValueError(
                    f"{self.livestock} classes overlap or are unsorted at index {i}")
            if cls.is_open and i != len(self.classes) - 1:
                raise ValueError(f"{self.livestock}: open class must be last")
            prev_max = cls.w_max if cls.w_max is not None else math.inf

    def __len__(self) -> int:
        return len(self.classes)

    def class_of(self, heads: int) -> int | None:
        """Index of the window containing ``heads``, or None if in no window."""
        for i, cls in enumerate(self.classes):
            if cls.contains(heads):
                return i
        return None


def resolve_open_cap(w_min: int, farms: int, enclosing_total: int | None) -> int:
    """Finite stand-in for the unbounded top class's head-count ceiling.

    Large enough to dominate any realistic instance: the enclosing
    admin-level total when known, and at least 100x the window floor
    per farm either way.
    """
    return max(enclosing_total or 0, w_min * max(farms, 1) * 100)


@dataclass(frozen=True)
class CountCell:
    """Farm and head counts for one (region, class) slot; None = redacted."""

    farms: int | None
    heads: int | None

    def __post_init__(self):
        if self.farms is not None and self.farms < 0:
            raise ValueError(f"negative farm count {self.farms}")
        if self.heads is not None and self.heads < 0:
            raise ValueError(f"negative head count {self.heads}")
        if self.farms == 0 and self.heads not in (0, None):
            raise ValueError(f"zero farms cannot hold {self.heads} heads")


EMPTY_CELL = CountCell(None, None)


@dataclass(frozen=True)
class CountTable:
    """Counts for one (level, region, livestock, subtype).

    ``by_class`` maps class indices of the livestock's scheme to cells;
    ``imputed`` records which head counts were filled rather than observed
    (class indices, or TOTAL_INDEX for the total).
    """

    level: Level
    region: str
    livestock: str
    subtype: str
    by_class: dict[int, CountCell] = field(default_factory=dict)
    total: CountCell = EMPTY_CELL
    imputed: frozenset[int] = frozenset()

    @property
    def group(self) -> tuple[str, str]:
        return (self.livestock, self.subtype)

    def with_heads(self, index: int, heads: int) -> "CountTable":
        """Copy with one head count filled and flagged as imputed."""
        if index == TOTAL_INDEX:
            total = CountCell(self.total.farms, heads)
            return replace(self, total=total, imputed=self.imputed | {TOTAL_INDEX})
        cell = self.by_class[index]
        by_class = dict(self.by_class)
        by_class[index] = CountCell(cell.farms, heads)
        return replace(self, by_class=by_class, imputed=self.imputed | {index})

    def missing_class_heads(self) -> list[int]:
        return [i for i in sorted(self.by_class) if self.by_class[i].heads is None]

    def has_missing(self) -> bool:
        return self.total.heads is None or bool(self.missing_class_heads())

    def known_class_sum(self) -> int:
        return sum(c.heads for c in self.by_class.values() if c.heads is not None)

    def check_sum_consistency(self) -> bool:
        """True when class heads (all present) add up to the present total."""
        if self.total.heads is None:
            return True
        if any(c.heads is None for c in self.by_class.values()):
            return True
        if not self.by_class:
            return True
        return self.known_class_sum() == self.total.heads


@dataclass(frozen=True)
class CellInfo:
    lat: float
    lon: float
    county: str


@dataclass(frozen=True)
class GridGeometry:
    """Integer-id grid cells with centroids and county membership."""

    cells: dict[tuple[int, int], CellInfo]
    resolution_arcmin: float = 5.0

    def __post_init__(self):
        index: dict[str, list[tuple[int, int]]] = {}
        for cell in sorted(self.cells):
            index.setdefault(self.cells[cell].county, []).append(cell)
        object.__setattr__(self, "_county_index", index)

    def __contains__(self, cell: tuple[int, int]) -> bool:
        return cell in self.cells

    def county_of(self, cell: tuple[int, int]) -> str:
        return self.cells[cell].county

    def centroid(self, cell: tuple[int, int]) -> tuple[float, float]:
        info = self.cells[cell]
        return (info.lat, info.lon)

    def counties(self) -> list[str]:
        return sorted(self._county_index)

    def cells_in_county(self, county: str) -> list[tuple[int, int]]:
        return list(self._county_index.get(county, []))

    def central_cell(self, county: str) -> tuple[int, int]:
        """Cell whose centroid is nearest the mean centroid of the county."""
        cells = self.cells_in_county(county)
        if not cells:
            raise KeyError(f"county {county} has no grid cells")
        mean_lat = sum(self.cells[c].lat for c in cells) / len(cells)
        mean_lon = sum(self.cells[c].lon for c in cells) / len(cells)

        def dist2(cell):
            info = self.cells[cell]
            return (info.lat - mean_lat) ** 2 + (info.lon - mean_lon) ** 2

        return min(cells, key=lambda c: (dist2(c), c))


@dataclass(frozen=True)
class GridLayer:
    """Sparse nonnegative per-cell values for one layer key; absent cell = 0."""

    key: object
    values: dict[tuple[int, int], float]

    def __post_init__(self):
        for cell, v in self.values.items():
            if v < 0:
                raise ValueError(f"negative layer value {v} at {cell}")

    def value(self, cell: tuple[int, int]) -> float:
        return self.values.get(cell, 0.0)

    def total(self) -> float:
        return sum(self.values.values())


@dataclass(frozen=True)
class FarmRecord:
    """One generated farm; ``cell=None`` until assignment."""

    id: str
    county: str
    livestock: str
    size_class: int
    heads_by_subtype: dict[str, int]
    cell: tuple[int, int] | None = None

    @property
    def total_heads(self) -> int:
        return sum(self.heads_by_subtype.values())

    def assigned_to(self, cell: tuple[int, int]) -> "FarmRecord":
        return replace(self, cell=cell)


class PointKind(str, enum.Enum):
    PLANT = "PLANT"
    CAFO = "CAFO"
    INCIDENCE = "INCIDENCE"


@dataclass(frozen=True)
class PointRecord:
    """A georeferenced point of interest: processing plant, CAFO, or case report.

    ``attributes`` is a free-form string bag (e.g. ``product_codes``,
    ``species``, ``host_type``, ``date``, ``count``); which keys are required
    depends on ``kind`` and is enforced by the loader, not here.
    """

    id: str
    kind: PointKind
    lat: float
    lon: float
    county: str
    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise CoordinateOutOfRange(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise CoordinateOutOfRange(f"longitude {self.lon} outside [-180, 180]")


# -- size-class alignment --------------------------------------------------

def _overlaps(a: SizeClass, b: SizeClass) -> bool:
    a_max = a.w_max if a.w_max is not None else math.inf
    b_max = b.w_max if b.w_max is not None else math.inf
    return a.w_min <= b_max and b.w_min <= a_max

def _nested_in(inner: SizeClass, outer: SizeClass) -> bool:
    if inner.w_min < outer.w_min:
        return False
    if outer.w_max is None:
        return True
    return inner.w_max is not None and inner.w_max <= outer.w_max


def class_mapping(state_scheme: SizeClassScheme,
                  county_scheme: SizeClassScheme) -> dict[int, int]:
    """Map each state class index to the county class it nests inside."""
    mapping: dict[int, int] = {}
    for si, s_cls in enumerate(state_scheme.classes):
        hits = [ci for ci, c_cls in enumerate(county_scheme.classes)
                if _overlaps(s_cls, c_cls)]
        if len(hits) > 1:
            raise StateClassStraddlesCountyClass(
                f"{state_scheme.livestock} state class {si} "
                f"({s_cls.w_min}, {s_cls.w_max}) overlaps county classes {hits}")
        if not hits or not _nested_in(s_cls, county_scheme.classes[hits[0]]):
            raise ValueError(
                f"{state_scheme.livestock} state class {si} "
                f"({s_cls.w_min}, {s_cls.w_max}) is not nested in any county class")
        mapping[si] = hits[0]
    return mapping


def _merge_cells(cells: list[CountCell]) -> CountCell:
    # a merged count is present only when every constituent is present
    farms = None if any(c.farms is None for c in cells) else sum(c.farms for c in cells)
    heads = None if any(c.heads is None for c in cells) else sum(c.heads for c in cells)
    if farms == 0 and heads is None:
        heads = 0
    return CountCell(farms, heads)


def align_size_classes(state_scheme: SizeClassScheme,
                       county_scheme: SizeClassScheme,
                       state_table: CountTable) -> CountTable:
    """Re-express a state table in county size classes.

    State classes that nest inside a county class are summed into it; a
    state class overlapping two county classes raises
    StateClassStraddlesCountyClass.
    """
    mapping = class_mapping(state_scheme, county_scheme)
    grouped: dict[int, list[CountCell]] = {}
    for si in sorted(state_table.by_class):
        grouped.setdefault(mapping[si], []).append(state_table.by_class[si])
    by_class = {ci: _merge_cells(cells) for ci, cells in sorted(grouped.items())}
    return replace(state_table, by_class=by_class)


# -- bound derivation ------------------------------------------------------

def derive_bounds(table: CountTable,
                  scheme: SizeClassScheme,
                  refining_tables: tuple[CountTable, ...] = (),
                  enclosing_total: int | None = None) -> dict[int, tuple[int, int]]:
    """Lower/upper bounds for every redacted head count in ``table``.

    Keys are class indices (TOTAL_INDEX for the total).  Class bounds come
    from farm counts times the class window; the open top class uses the
    resolved cap.  Lower bounds are raised by matching known counts in
    ``refining_tables`` (finer-grained tables partitioning this region).
    Raises InconsistentBounds when refinement pushes a lower bound above
    the upper bound.
    """
    refs = [t for t in refining_tables if t.group == table.group]
    bounds: dict[int, tuple[int, int]] = {}

    for i in table.missing_class_heads():
        cell = table.by_class[i]
        if cell.farms is None:
            # no farm count, no window product; such classes get no entry
            continue
        lo, up = _class_bounds(scheme, i, cell.farms, enclosing_total)
        # known same-class heads of sub-regions are a valid lower bound
        refined = sum(t.by_class[i].heads for t in refs
                      if i in t.by_class and t.by_class[i].heads is not None)
        lo = max(lo, refined)
        if lo > up:
            raise InconsistentBounds(
                f"class {i}: refined lower bound {lo} exceeds upper bound {up}")
        bounds[i] = (lo, up)

    if table.total.heads is None:
        lo = up = 0
        indeterminate = not table.by_class
        for i in sorted(table.by_class):
            cell = table.by_class[i]
            if cell.heads is not None:
                lo += cell.heads
                up += cell.heads
            elif cell.farms is not None:
                clo, cup = _class_bounds(scheme, i, cell.farms, enclosing_total)
                lo += clo
                up += cup
            else:
                indeterminate = True
        if indeterminate:
            if enclosing_total is None:
                raise ValueError(
                    "cannot bound a total without class data or an enclosing total")
            up = enclosing_total
        refined = sum(t.total.heads for t in refs if t.total.heads is not None)
        lo = max(lo, refined)
        if lo > up:
            raise InconsistentBounds(
                f"total: refined lower bound {lo} exceeds upper bound {up}")
        bounds[TOTAL_INDEX] = (lo, up)

    return bounds


def _class_bounds(scheme: SizeClassScheme, index: int, farms: int,
                  enclosing_total: int | None) -> tuple[int, int]:
    cls = scheme.classes[index]
    if farms == 0:
        return (0, 0)
    lo = cls.w_min * farms
    if cls.is_open:
        up = resolve_open_cap(cls.w_min, farms, enclosing_total)
    else:
        up = cls.w_max * farms
    return (lo, up)
