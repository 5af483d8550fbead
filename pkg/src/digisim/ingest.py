"""CSV loaders and canonical serializers for every pipeline input.

All files are UTF-8 with a header row, comma separators, and '.' decimals.
Loaders reject files whose header differs from the documented schema
(unknown or reordered columns are errors, never silently ignored), validate
each row, and report the first violation with its file line number (the
header is line 1).  Serializers emit a canonical row order and number
format, so loading and re-serializing a conforming file is byte-identical.

Canonical orders: census by (level, region, livestock, subtype) with the
total row before the class rows; size classes by (livestock, class_index);
geometry by cell id; gridded layers by (key, cell id); points by id;
prevalence by (week, cell id).  List-valued attributes (product codes) use
'|' as the separator inside the 'key=value;key=value' attribute bag.
"""

from __future__ import annotations

import csv
import enum
import re
from pathlib import Path
from typing import Collection, Iterable, Mapping

from .errors import (
    BadWeek,
    CoordinateOutOfRange,
    NegativeCount,
    NegativeValue,
    SchemaError,
    UnknownCell,
    UnknownSizeClass,
)
from .model import (
    TOTAL_INDEX,
    CellInfo,
    CountCell,
    CountTable,
    FarmRecord,
    GridGeometry,
    GridLayer,
    Level,
    PointKind,
    PointRecord,
    SizeClass,
    SizeClassScheme,
)

CENSUS_HEADER = ["level", "region_fips", "livestock", "subtype", "class_index", "farms", "heads"]
SIZE_CLASS_HEADER = ["livestock", "class_index", "w_min", "w_max"]
GEOMETRY_HEADER = ["x", "y", "lat", "lon", "county_fips"]
POINTS_HEADER = ["id", "kind", "lat", "lon", "county_fips", "attributes"]
FARMS_HEADER = ["farm_id", "county_fips", "livestock", "class_index", "subtype", "heads"]
ASSIGNMENTS_HEADER = ["farm_id", "x", "y"]
SPECIES_GROUPS_HEADER = ["species", "group"]
QUARTERLY_COUNTS_HEADER = ["county_fips", "quarter", "count"]

ATTRIBUTE_LIST_SEPARATOR = "|"


class LayerKind(str, enum.Enum):
    GLW = "GLW"
    BIRDS = "BIRDS"
    POPULATION = "POPULATION"


LAYER_HEADERS = {
    LayerKind.GLW: ["x", "y", "livestock", "heads"],
    LayerKind.BIRDS: ["x", "y", "species", "week", "abundance"],
    LayerKind.POPULATION: ["x", "y", "demographic", "employment", "count"],
}

#: Attribute-bag keys each point kind must carry.
REQUIRED_POINT_ATTRIBUTES = {
    PointKind.PLANT: ("product_codes",),
    PointKind.CAFO: ("livestock",),
    PointKind.INCIDENCE: ("date", "species"),
}


class PlantRiskLevel(enum.Enum):
    """Unpasteurized-product exposure risk of a processing plant.

    HIGH > MEDIUM > LOW form a total order; UNKNOWN means no product code
    classified and is incomparable.
    """

    HIGH = "HIGH"
    MEDIUM = "MEDIUM"
    LOW = "LOW"
    UNKNOWN = "UNKNOWN"


_RISK_RANK = {
    PlantRiskLevel.HIGH: 3,
    PlantRiskLevel.MEDIUM: 2,
    PlantRiskLevel.LOW: 1,
    PlantRiskLevel.UNKNOWN: 0,
}

#: (prefix, low, high, level) product-code ranges, both ends inclusive.
_CODE_RANGES = (
    ("M", 1, 3, PlantRiskLevel.HIGH),
    ("M", 6, 9, PlantRiskLevel.HIGH),
    ("C", 3, 47, PlantRiskLevel.HIGH),
    ("B", 1, 9, PlantRiskLevel.HIGH),
    ("M", 10, 14, PlantRiskLevel.MEDIUM),
    ("D", 1, 18, PlantRiskLevel.LOW),
    ("W", 1, 25, PlantRiskLevel.LOW),
    ("F", 1, 15, PlantRiskLevel.LOW),
    ("S", 4, 46, PlantRiskLevel.LOW),
)

_CODE_PATTERN = re.compile(r"([A-Za-z]+)([0-9]+)")


def _classify_code(code: str) -> PlantRiskLevel:
    match = _CODE_PATTERN.fullmatch(code.strip())
    if match is None:
        return PlantRiskLevel.UNKNOWN
    prefix, number = match.group(1).upper(), int(match.group(2))
    # Section-II product codes (P prefix) are treated as high risk.
    if prefix == "P":
        return PlantRiskLevel.HIGH
    for range_prefix, low, high, level in _CODE_RANGES:
        if prefix == range_prefix and low <= number <= high:
            return level
    return PlantRiskLevel.UNKNOWN


def classify_plant_risk(product_codes: Iterable[str]) -> PlantRiskLevel:
    """Highest risk level over a plant's product codes.

    Order-independent and monotone: adding a code never lowers the result.
    UNKNOWN only when no code classifies.
    """
    best = PlantRiskLevel.UNKNOWN
    for code in product_codes:
        level = _classify_code(code)
        if _RISK_RANK[level] > _RISK_RANK[best]:
            best = level
    return best


# -- row-level parsing helpers ---------------------------------------------


def _read_rows(path, expected_header: list[str]) -> list[tuple[int, list[str]]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {expected_header}")
        if header != expected_header:
            raise SchemaError(
                f"{path}: header {header} does not match the required columns "
                f"{expected_header}"
            )
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise SchemaError(
                    f"{path} line {line}: expected {len(expected_header)} fields, "
                    f"got {len(row)}"
                )
            rows.append((line, row))
    return rows


def _int(text: str, path, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise SchemaError(f"{path} line {line}: {column} {text!r} is not an integer")


def _opt_int(text: str, path, line: int, column: str) -> int | None:
    return None if text == "" else _int(text, path, line, column)


def _float(text: str, path, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"{path} line {line}: {column} {text!r} is not a number")


def _nonempty(text: str, path, line: int, column: str) -> str:
    if text == "":
        raise SchemaError(f"{path} line {line}: {column} must not be empty")
    return text


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_rows(path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(field) for field in row])


# -- size classes ----------------------------------------------------------


def load_size_classes(path) -> dict[str, SizeClassScheme]:
    """Schemes keyed by livestock; class indices must run 0..n-1 in order."""
    grouped: dict[str, list[tuple[int, int, int, int | None]]] = {}
    for line, row in _read_rows(path, SIZE_CLASS_HEADER):
        livestock = _nonempty(row[0], path, line, "livestock")
        index = _int(row[1], path, line, "class_index")
        w_min = _int(row[2], path, line, "w_min")
        w_max = _opt_int(row[3], path, line, "w_max")
        grouped.setdefault(livestock, []).append((index, w_min, w_max, line))

    schemes = {}
    for livestock, entries in grouped.items():
        entries.sort()
        indices = [e[0] for e in entries]
        if indices != list(range(len(entries))):
            raise SchemaError(
                f"{path}: livestock {livestock}: class indices {indices} "
                f"are not 0..{len(entries) - 1}"
            )
        try:
            classes = tuple(SizeClass(w_min, w_max) for _, w_min, w_max, _ in entries)
            schemes[livestock] = SizeClassScheme(livestock, classes)
        except ValueError as exc:
            raise SchemaError(f"{path}: livestock {livestock}: {exc}")
    return schemes


def save_size_classes(schemes: Mapping[str, SizeClassScheme], path) -> None:
    rows = []
    for livestock in sorted(schemes):
        for index, cls in enumerate(schemes[livestock].classes):
            rows.append((livestock, index, cls.w_min, cls.w_max))
    _write_rows(path, SIZE_CLASS_HEADER, rows)


# -- census tables ---------------------------------------------------------


def load_census(
    path,
    schemes: Mapping[str, SizeClassScheme],
    drop_missing_head_classes: bool | Collection[str] = False,
) -> list[CountTable]:
    """Count tables per (level, region, livestock, subtype).

    Empty farms or heads fields mean the value is redacted.  Known class
    cells are checked against the window capacity: heads must lie within
    [farms * w_min, farms * w_max].  ``drop_missing_head_classes`` discards
    class rows whose heads are redacted, for every livestock (True) or the
    given ones; total rows are never dropped.
    """
    if drop_missing_head_classes is True:
        dropped = set(schemes)
    elif drop_missing_head_classes is False:
        dropped = set()
    else:
        dropped = set(drop_missing_head_classes)

    by_group: dict[tuple, dict[int, CountCell]] = {}
    totals: dict[tuple, CountCell] = {}
    for line, row in _read_rows(path, CENSUS_HEADER):
        try:
            level = Level(row[0])
        except ValueError:
            raise SchemaError(f"{path} line {line}: level {row[0]!r} is not STATE|COUNTY")
        region = _nonempty(row[1], path, line, "region_fips")
        livestock = _nonempty(row[2], path, line, "livestock")
        subtype = _nonempty(row[3], path, line, "subtype")
        index = _int(row[4], path, line, "class_index")
        farms = _opt_int(row[5], path, line, "farms")
        heads = _opt_int(row[6], path, line, "heads")
        if livestock not in schemes:
            raise UnknownSizeClass(
                f"{path} line {line}: no size-class scheme for livestock {livestock!r}"
            )
        try:
            cell = CountCell(farms=farms, heads=heads)
        except ValueError as exc:
            raise NegativeCount(f"{path} line {line}: {exc}")

        key = (level, region, livestock, subtype)
        if index == TOTAL_INDEX:
            if key in totals:
                raise SchemaError(f"{path} line {line}: duplicate total row for {key}")
            totals[key] = cell
            continue

        scheme = schemes[livestock]
        if not 0 <= index < len(scheme):
            raise UnknownSizeClass(
                f"{path} line {line}: class {index} not in the "
                f"{len(scheme)}-class scheme for {livestock}"
            )
        window = scheme.classes[index]
        if farms is not None and heads is not None:
            low = farms * window.w_min
            high = None if window.is_open else farms * window.w_max
            if heads < low or (high is not None and heads > high):
                raise NegativeCount(
                    f"{path} line {line}: heads {heads} outside "
                    f"[{low}, {high if high is not None else 'inf'}] implied by "
                    f"{farms} farms in class {index} of {livestock}"
                )
        if heads is None and livestock in dropped:
            continue
        group = by_group.setdefault(key, {})
        if index in group:
            raise SchemaError(f"{path} line {line}: duplicate class {index} for {key}")
        group[index] = cell

    tables = []
    for key in sorted(set(by_group) | set(totals), key=lambda k: (k[0].value, *k[1:])):
        if key not in totals:
            raise SchemaError(f"{path}: no total row (class_index -1) for {key}")
        level, region, livestock, subtype = key
        tables.append(
            CountTable(
                level=level,
                region=region,
                livestock=livestock,
                subtype=subtype,
                by_class=by_group.get(key, {}),
                total=totals[key],
            )
        )
    return tables


def save_census(tables: Iterable[CountTable], path) -> None:
    rows = []
    ordered = sorted(tables, key=lambda t: (t.level.value, t.region, t.livestock, t.subtype))
    for table in ordered:
        rows.append(
            (table.level.value, table.region, table.livestock, table.subtype,
             TOTAL_INDEX, table.total.farms, table.total.heads)
        )
        for index in sorted(table.by_class):
            cell = table.by_class[index]
            rows.append(
                (table.level.value, table.region, table.livestock, table.subtype,
                 index, cell.farms, cell.heads)
            )
    _write_rows(path, CENSUS_HEADER, rows)


# -- grid geometry ---------------------------------------------------------


def load_geometry(path) -> GridGeometry:
    cells: dict[tuple[int, int], CellInfo] = {}
    for line, row in _read_rows(path, GEOMETRY_HEADER):
        cell = (_int(row[0], path, line, "x"), _int(row[1], path, line, "y"))
        lat = _float(row[2], path, line, "lat")
        lon = _float(row[3], path, line, "lon")
        county = _nonempty(row[4], path, line, "county_fips")
        if not -90.0 <= lat <= 90.0:
            raise CoordinateOutOfRange(f"{path} line {line}: latitude {lat} out of range")
        if not -180.0 <= lon <= 180.0:
            raise CoordinateOutOfRange(f"{path} line {line}: longitude {lon} out of range")
        if cell in cells:
            raise SchemaError(f"{path} line {line}: duplicate cell {cell}")
        cells[cell] = CellInfo(lat=lat, lon=lon, county=county)
    return GridGeometry(cells)


def save_geometry(geometry: GridGeometry, path) -> None:
    rows = []
    for cell in sorted(geometry.cells):
        info = geometry.cells[cell]
        rows.append((cell[0], cell[1], info.lat, info.lon, info.county))
    _write_rows(path, GEOMETRY_HEADER, rows)


# -- gridded layers --------------------------------------------------------


def load_gridded_layer(path, kind: LayerKind, geometry: GridGeometry) -> dict:
    """Layers keyed by livestock (GLW), (species, week) (BIRDS), or
    (demographic, employment) (POPULATION); duplicate cell rows are summed."""
    kind = LayerKind(kind)
    accumulated: dict[object, dict[tuple[int, int], float]] = {}
    for line, row in _read_rows(path, LAYER_HEADERS[kind]):
        cell = (_int(row[0], path, line, "x"), _int(row[1], path, line, "y"))
        if cell not in geometry:
            raise UnknownCell(f"{path} line {line}: cell {cell} not in geometry")
        if kind is LayerKind.GLW:
            key = _nonempty(row[2], path, line, "livestock")
            value = _float(row[3], path, line, "heads")
        elif kind is LayerKind.BIRDS:
            species = _nonempty(row[2], path, line, "species")
            week = _int(row[3], path, line, "week")
            if not 1 <= week <= 52:
                raise BadWeek(f"{path} line {line}: week {week} outside 1..52")
            key = (species, week)
            value = _float(row[4], path, line, "abundance")
        else:
            key = (
                _nonempty(row[2], path, line, "demographic"),
                _nonempty(row[3], path, line, "employment"),
            )
            value = _float(row[4], path, line, "count")
        if value < 0:
            raise NegativeValue(f"{path} line {line}: negative value {value}")
        cells = accumulated.setdefault(key, {})
        cells[cell] = cells.get(cell, 0.0) + value
    return {key: GridLayer(key=key, values=accumulated[key]) for key in sorted(accumulated)}


def save_gridded_layers(layers: Mapping, kind: LayerKind, path) -> None:
    kind = LayerKind(kind)
    rows = []
    for key in sorted(layers):
        layer = layers[key]
        key_fields = (key,) if kind is LayerKind.GLW else tuple(key)
        for cell in sorted(layer.values):
            rows.append((cell[0], cell[1], *key_fields, layer.values[cell]))
    _write_rows(path, LAYER_HEADERS[kind], rows)


# -- point records ---------------------------------------------------------


def _parse_attributes(text: str, path, line: int) -> dict[str, str]:
    attributes: dict[str, str] = {}
    if text == "":
        return attributes
    for part in text.split(";"):
        key, sep, value = part.partition("=")
        if not sep or key == "":
            raise SchemaError(
                f"{path} line {line}: attribute {part!r} is not key=value"
            )
        if key in attributes:
            raise SchemaError(f"{path} line {line}: duplicate attribute {key!r}")
        attributes[key] = value
    return attributes


def load_point_records(path, kind: PointKind | None = None) -> list[PointRecord]:
    """Validated point records sorted by id; ``kind`` filters when given."""
    records = []
    seen_ids = set()
    for line, row in _read_rows(path, POINTS_HEADER):
        ident = _nonempty(row[0], path, line, "id")
        if ident in seen_ids:
            raise SchemaError(f"{path} line {line}: duplicate id {ident!r}")
        seen_ids.add(ident)
        try:
            row_kind = PointKind(row[1])
        except ValueError:
            raise SchemaError(
                f"{path} line {line}: kind {row[1]!r} is not PLANT|CAFO|INCIDENCE"
            )
        lat = _float(row[2], path, line, "lat")
        lon = _float(row[3], path, line, "lon")
        county = _nonempty(row[4], path, line, "county_fips")
        attributes = _parse_attributes(row[5], path, line)
        for required in REQUIRED_POINT_ATTRIBUTES[row_kind]:
            if required not in attributes:
                raise SchemaError(
                    f"{path} line {line}: {row_kind.value} record {ident!r} "
                    f"lacks required attribute {required!r}"
                )
        try:
            record = PointRecord(
                id=ident, kind=row_kind, lat=lat, lon=lon, county=county,
                attributes=attributes,
            )
        except CoordinateOutOfRange as exc:
            raise CoordinateOutOfRange(f"{path} line {line}: {exc}")
        records.append(record)
    records.sort(key=lambda r: r.id)
    if kind is not None:
        records = [r for r in records if r.kind is kind]
    return records


def save_point_records(records: Iterable[PointRecord], path) -> None:
    rows = []
    for record in sorted(records, key=lambda r: r.id):
        bag = ";".join(f"{k}={record.attributes[k]}" for k in sorted(record.attributes))
        rows.append(
            (record.id, record.kind.value, record.lat, record.lon, record.county, bag)
        )
    _write_rows(path, POINTS_HEADER, rows)


def point_product_codes(record: PointRecord) -> list[str]:
    """Product codes from a plant record's attribute bag."""
    text = record.attributes.get("product_codes", "")
    return [code for code in text.split(ATTRIBUTE_LIST_SEPARATOR) if code]


# -- prevalence ------------------------------------------------------------


def load_prevalence(path, geometry: GridGeometry | None = None) -> dict:
    """Weekly prevalence: scalar per week, or per-cell layers when the file
    carries x,y columns (requires ``geometry``)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as handle:
        header = next(csv.reader(handle), None)
    if header == ["week", "value"]:
        per_cell = False
    elif header == ["week", "x", "y", "value"]:
        per_cell = True
        if geometry is None:
            raise SchemaError(f"{path}: cell-level prevalence requires a geometry")
    else:
        raise SchemaError(
            f"{path}: header {header} is neither [week, value] nor [week, x, y, value]"
        )

    expected = ["week", "x", "y", "value"] if per_cell else ["week", "value"]
    scalars: dict[int, float] = {}
    cells: dict[int, dict[tuple[int, int], float]] = {}
    for line, row in _read_rows(path, expected):
        week = _int(row[0], path, line, "week")
        if not 1 <= week <= 52:
            raise BadWeek(f"{path} line {line}: week {week} outside 1..52")
        value = _float(row[-1], path, line, "value")
        if value < 0:
            raise NegativeValue(f"{path} line {line}: negative prevalence {value}")
        if per_cell:
            cell = (_int(row[1], path, line, "x"), _int(row[2], path, line, "y"))
            if cell not in geometry:
                raise UnknownCell(f"{path} line {line}: cell {cell} not in geometry")
            week_cells = cells.setdefault(week, {})
            if cell in week_cells:
                raise SchemaError(f"{path} line {line}: duplicate ({week}, {cell})")
            week_cells[cell] = value
        else:
            if week in scalars:
                raise SchemaError(f"{path} line {line}: duplicate week {week}")
            scalars[week] = value
    if per_cell:
        return {week: GridLayer(key=("prevalence", week), values=cells[week])
                for week in sorted(cells)}
    return scalars


# -- pipeline artifacts: farms, assignments, auxiliary tables --------------


def load_farms(path) -> list[FarmRecord]:
    """Synthesized farms from farms.csv; one input row per nonzero subtype."""
    partial: dict[str, dict] = {}
    for line, row in _read_rows(path, FARMS_HEADER):
        ident = _nonempty(row[0], path, line, "farm_id")
        county = _nonempty(row[1], path, line, "county_fips")
        livestock = _nonempty(row[2], path, line, "livestock")
        class_index = _int(row[3], path, line, "class_index")
        subtype = _nonempty(row[4], path, line, "subtype")
        heads = _int(row[5], path, line, "heads")
        if heads <= 0:
            raise NegativeCount(f"{path} line {line}: subtype rows must be positive")
        entry = partial.setdefault(
            ident,
            {"county": county, "livestock": livestock, "class_index": class_index,
             "heads": {}},
        )
        if (entry["county"], entry["livestock"], entry["class_index"]) != (
            county, livestock, class_index
        ):
            raise SchemaError(f"{path} line {line}: inconsistent rows for {ident!r}")
        if subtype in entry["heads"]:
            raise SchemaError(f"{path} line {line}: duplicate subtype for {ident!r}")
        entry["heads"][subtype] = heads
    return [
        FarmRecord(
            id=ident, county=entry["county"], livestock=entry["livestock"],
            size_class=entry["class_index"], heads_by_subtype=entry["heads"],
        )
        for ident, entry in sorted(partial.items())
    ]


def save_farms(farms: Iterable[FarmRecord], path) -> None:
    rows = []
    for farm in sorted(farms, key=lambda f: f.id):
        for subtype in sorted(farm.heads_by_subtype):
            heads = farm.heads_by_subtype[subtype]
            if heads > 0:
                rows.append(
                    (farm.id, farm.county, farm.livestock, farm.size_class,
                     subtype, heads)
                )
    _write_rows(path, FARMS_HEADER, rows)


def load_assignments(path) -> dict[str, tuple[int, int]]:
    assignment: dict[str, tuple[int, int]] = {}
    for line, row in _read_rows(path, ASSIGNMENTS_HEADER):
        ident = _nonempty(row[0], path, line, "farm_id")
        if ident in assignment:
            raise SchemaError(f"{path} line {line}: duplicate farm {ident!r}")
        assignment[ident] = (_int(row[1], path, line, "x"), _int(row[2], path, line, "y"))
    return assignment


def save_assignments(assignment: Mapping[str, tuple[int, int]], path) -> None:
    rows = [(ident, *assignment[ident]) for ident in sorted(assignment)]
    _write_rows(path, ASSIGNMENTS_HEADER, rows)


def load_species_groups(path) -> dict[str, str]:
    """Species-to-group mapping used by abundance recall."""
    grouping: dict[str, str] = {}
    for line, row in _read_rows(path, SPECIES_GROUPS_HEADER):
        species = _nonempty(row[0], path, line, "species")
        group = _nonempty(row[1], path, line, "group")
        if species in grouping:
            raise SchemaError(f"{path} line {line}: duplicate species {species!r}")
        grouping[species] = group
    return grouping


def save_species_groups(grouping: Mapping[str, str], path) -> None:
    _write_rows(path, SPECIES_GROUPS_HEADER,
                [(s, grouping[s]) for s in sorted(grouping)])


def load_quarterly_counts(path) -> dict[str, list[float]]:
    """Per-county quarterly count series; quarters 1..4, at least one each."""
    staged: dict[str, dict[int, float]] = {}
    for line, row in _read_rows(path, QUARTERLY_COUNTS_HEADER):
        county = _nonempty(row[0], path, line, "county_fips")
        quarter = _int(row[1], path, line, "quarter")
        if not 1 <= quarter <= 4:
            raise SchemaError(f"{path} line {line}: quarter {quarter} outside 1..4")
        count = _float(row[2], path, line, "count")
        if count < 0:
            raise NegativeValue(f"{path} line {line}: negative count {count}")
        quarters = staged.setdefault(county, {})
        if quarter in quarters:
            raise SchemaError(f"{path} line {line}: duplicate quarter for {county}")
        quarters[quarter] = count
    return {
        county: [quarters[q] for q in sorted(quarters)]
        for county, quarters in sorted(staged.items())
    }


def save_quarterly_counts(counts: Mapping[str, Mapping[int, float] | list], path) -> None:
    rows = []
    for county in sorted(counts):
        series = counts[county]
        items = (
            sorted(series.items())
            if isinstance(series, Mapping)
            else list(enumerate(series, start=1))
        )
        for quarter, value in items:
            rows.append((county, quarter, float(value)))
    _write_rows(path, QUARTERLY_COUNTS_HEADER, rows)


def save_prevalence(prevalence: Mapping, path) -> None:
    weeks = sorted(prevalence)
    per_cell = bool(weeks) and isinstance(prevalence[weeks[0]], GridLayer)
    if per_cell:
        rows = []
        for week in weeks:
            layer = prevalence[week]
            for cell in sorted(layer.values):
                rows.append((week, cell[0], cell[1], layer.values[cell]))
        _write_rows(path, ["week", "x", "y", "value"], rows)
    else:
        _write_rows(path, ["week", "value"], [(w, float(prevalence[w])) for w in weeks])
