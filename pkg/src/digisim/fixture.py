"""Bundled two-county synthetic dataset exercising every pipeline stage.

The dataset is built from a hand-written ground-truth farm list.  Census
tables are aggregated from that truth and then redacted so that every
missing value is forced back to its true value by the fill chain: totals
follow from sibling sums, and each county-by-size matrix carries at most
one unknown per row, so the row residual pins it exactly.  The gridded
livestock layer equals the truth cell loads, giving the assignment stage
a zero-deviation witness.  Tests lean on this: the filled census must
reproduce the truth byte for byte, and state-level alignment of the
synthesized farms is exact.

Everything here is deterministic and handcrafted; no randomness.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

from . import ingest
from .ingest import LayerKind
from .model import (
    ALL_SUBTYPE,
    COUNTRY_REGION,
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
    state_of_county,
)

STATE = "48"
COUNTY_WEST = "48001"
COUNTY_EAST = "48003"

WORKER_EMPLOYMENT = "livestock_workers"

SPECIES_BASE = {
    "mallard": 40.0,
    "gadwall": 25.0,
    "canada_goose": 18.0,
    "bald_eagle": 2.0,
}

SPECIES_GROUPS = {
    "mallard": "Duck",
    "gadwall": "Duck",
    "canada_goose": "Goose",
    "bald_eagle": "Eagle",
}

WEEKLY_PREVALENCE = (0.015, 0.01, 0.005, 0.02)  # per calendar quarter


def fixture_schemes() -> dict[str, SizeClassScheme]:
    return {
        "cattle": SizeClassScheme(
            "cattle",
            (SizeClass(1, 24), SizeClass(25, 99), SizeClass(100, None)),
        ),
        "hogs": SizeClassScheme(
            "hogs", (SizeClass(1, 999), SizeClass(1000, None)),
        ),
    }


def fixture_geometry() -> GridGeometry:
    cells = {}
    for x in range(6):
        county = COUNTY_WEST if x < 3 else COUNTY_EAST
        cells[(x, 0)] = CellInfo(
            lat=35.0 if x < 3 else 35.5,
            lon=-101.0 + x * (5.0 / 60.0),
            county=county,
        )
    return GridGeometry(cells)


def truth_farms() -> list[FarmRecord]:
    """Ground-truth farms; ids follow the generator's naming convention."""

    def farm(n, county, livestock, size_class, heads, cell):
        return FarmRecord(
            id=f"{county}-{livestock}-{n:05d}", county=county,
            livestock=livestock, size_class=size_class,
            heads_by_subtype=heads, cell=cell,
        )

    return [
        farm(1, COUNTY_WEST, "cattle", 0, {"beef": 10}, (0, 0)),
        farm(2, COUNTY_WEST, "cattle", 0, {"beef": 16}, (1, 0)),
        farm(3, COUNTY_WEST, "cattle", 1, {"beef": 40, "milk": 20}, (0, 0)),
        farm(4, COUNTY_WEST, "cattle", 1, {"milk": 30}, (2, 0)),
        farm(5, COUNTY_WEST, "cattle", 2, {"beef": 80, "milk": 40}, (2, 0)),
        farm(6, COUNTY_WEST, "cattle", 2, {"beef": 150}, (1, 0)),
        farm(1, COUNTY_EAST, "cattle", 0, {"beef": 12}, (3, 0)),
        farm(2, COUNTY_EAST, "cattle", 1, {"beef": 30, "milk": 24}, (4, 0)),
        farm(3, COUNTY_EAST, "cattle", 1, {"milk": 60}, (5, 0)),
        farm(4, COUNTY_EAST, "cattle", 2, {"beef": 110}, (4, 0)),
        farm(5, COUNTY_EAST, "cattle", 2, {"beef": 90, "milk": 160}, (5, 0)),
        farm(1, COUNTY_WEST, "hogs", 0, {ALL_SUBTYPE: 600}, (1, 0)),
        farm(2, COUNTY_WEST, "hogs", 0, {ALL_SUBTYPE: 900}, (2, 0)),
        farm(1, COUNTY_EAST, "hogs", 1, {ALL_SUBTYPE: 1200}, (3, 0)),
        farm(2, COUNTY_EAST, "hogs", 0, {ALL_SUBTYPE: 800}, (4, 0)),
    ]


def truth_census() -> list[CountTable]:
    """County, state, and country tables aggregated from the truth farms.

    Whole-type tables bin farms by total head count; subtype tables bin by
    the subtype herd size, counting only farms that keep the subtype.
    Country rows carry totals only.
    """
    schemes = fixture_schemes()
    store: dict[tuple, dict] = defaultdict(
        lambda: {"classes": defaultdict(lambda: [0, 0]), "total": [0, 0]})

    def add(level, region, livestock, subtype, k, heads):
        entry = store[(level, region, livestock, subtype)]
        entry["classes"][k][0] += 1
        entry["classes"][k][1] += heads
        entry["total"][0] += 1
        entry["total"][1] += heads

    for farm in truth_farms():
        scheme = schemes[farm.livestock]
        regions = (
            (Level.COUNTY, farm.county),
            (Level.STATE, state_of_county(farm.county)),
            (Level.STATE, COUNTRY_REGION),
        )
        for level, region in regions:
            add(level, region, farm.livestock, ALL_SUBTYPE,
                farm.size_class, farm.total_heads)
            for subtype, heads in farm.heads_by_subtype.items():
                if subtype == ALL_SUBTYPE:
                    continue
                add(level, region, farm.livestock, subtype,
                    scheme.class_of(heads), heads)

    tables = []
    for (level, region, livestock, subtype), entry in sorted(
            store.items(), key=lambda kv: (kv[0][0].value,) + kv[0][1:]):
        by_class = {
            k: CountCell(f, h)
            for k, (f, h) in sorted(entry["classes"].items())
        }
        if region == COUNTRY_REGION:
            by_class = {}
        tables.append(CountTable(
            level=level, region=region, livestock=livestock, subtype=subtype,
            by_class=by_class, total=CountCell(*entry["total"]),
        ))
    return tables


# each entry is forced back to its truth value: totals by sibling sums,
# class heads by the single-unknown row residual
_REDACT_TOTALS = (
    (Level.STATE, STATE, "cattle", "milk"),
    (Level.COUNTY, COUNTY_EAST, "cattle", ALL_SUBTYPE),
    (Level.COUNTY, COUNTY_WEST, "cattle", "milk"),
    (Level.COUNTY, COUNTY_WEST, "hogs", ALL_SUBTYPE),
)
_REDACT_CLASSES = {
    (Level.STATE, STATE, "cattle", "beef"): 1,
    (Level.STATE, STATE, "hogs", ALL_SUBTYPE): 0,
    (Level.COUNTY, COUNTY_WEST, "cattle", ALL_SUBTYPE): 1,
    (Level.COUNTY, COUNTY_EAST, "cattle", "beef"): 2,
    (Level.COUNTY, COUNTY_EAST, "hogs", ALL_SUBTYPE): 0,
    (Level.COUNTY, COUNTY_WEST, "cattle", "milk"): 0,
}


def redacted_census() -> list[CountTable]:
    """Truth census with exactly recoverable head counts blanked out."""
    tables = []
    for table in truth_census():
        key = (table.level, table.region, table.livestock, table.subtype)
        if key in _REDACT_TOTALS:
            table = replace(table,
                            total=CountCell(table.total.farms, None))
        if key in _REDACT_CLASSES:
            index = _REDACT_CLASSES[key]
            by_class = dict(table.by_class)
            by_class[index] = CountCell(by_class[index].farms, None)
            table = replace(table, by_class=by_class)
        tables.append(table)
    return tables


def truth_glw() -> dict[str, GridLayer]:
    """Per-livestock cell loads of the truth farms."""
    loads: dict[str, dict] = defaultdict(dict)
    for farm in truth_farms():
        cells = loads[farm.livestock]
        cells[farm.cell] = cells.get(farm.cell, 0.0) + farm.total_heads
    return {livestock: GridLayer(livestock, cells)
            for livestock, cells in sorted(loads.items())}


def fixture_birds() -> dict[tuple[str, int], GridLayer]:
    """Weekly abundance: waterfowl-heavy winters, a mild west-east gradient."""
    layers = {}
    for species, base in sorted(SPECIES_BASE.items()):
        for week in range(1, 53):
            seasonal = 1.5 if week <= 13 or week >= 40 else 0.7
            layers[(species, week)] = GridLayer(
                (species, week),
                {(x, 0): base * seasonal * (1.0 + 0.1 * x) for x in range(6)},
            )
    return layers


def fixture_prevalence() -> dict[int, float]:
    out = {}
    for week in range(1, 53):
        quarter = min((week - 1) // 13, 3)
        out[week] = WEEKLY_PREVALENCE[quarter]
    return out


def fixture_population() -> dict[tuple[str, str], GridLayer]:
    return {
        ("all", WORKER_EMPLOYMENT): GridLayer(
            ("all", WORKER_EMPLOYMENT),
            {(x, 0): 4.0 + x for x in range(6)}),
        ("all", "retail"): GridLayer(
            ("all", "retail"), {(x, 0): 10.0 for x in range(6)}),
    }


def fixture_worker_counts() -> dict[str, list[float]]:
    # 48005 has reference data but no grid cells: lands in reference_only
    return {
        COUNTY_WEST: [10.0, 12.0, 11.0, 13.0],
        COUNTY_EAST: [5.0, 5.0, 6.0, 4.0],
        "48005": [2.0, 2.0, 2.0, 2.0],
    }


def fixture_points() -> list[PointRecord]:
    geometry = fixture_geometry()

    def near(cell, dlat, dlon):
        lat, lon = geometry.centroid(cell)
        return lat + dlat, lon + dlon

    def point(ident, kind, cell, dlat, dlon, county, attributes):
        lat, lon = near(cell, dlat, dlon)
        return PointRecord(id=ident, kind=kind, lat=lat, lon=lon,
                           county=county, attributes=attributes)

    cafo = PointKind.CAFO
    plant = PointKind.PLANT
    incidence = PointKind.INCIDENCE
    return [
        point("cafo-48001-a", cafo, (1, 0), 0.008, -0.004, COUNTY_WEST,
              {"livestock": "cattle", "permit": "TX-0001"}),
        point("cafo-48001-b", cafo, (2, 0), -0.006, 0.005, COUNTY_WEST,
              {"livestock": "cattle", "permit": "TX-0002"}),
        point("cafo-48003-a", cafo, (5, 0), 0.010, 0.002, COUNTY_EAST,
              {"livestock": "cattle", "permit": "TX-0003"}),
        point("cafo-48003-b", cafo, (4, 0), 0.004, -0.007, COUNTY_EAST,
              {"livestock": "cattle", "permit": "TX-0004"}),
        # below every hog threshold preset: stays unmatched
        point("cafo-48003-h", cafo, (3, 0), -0.003, 0.006, COUNTY_EAST,
              {"livestock": "hogs", "permit": "TX-0005"}),
        point("plant-01", plant, (0, 0), 0.002, 0.003, COUNTY_WEST,
              {"product_codes": "M1|M10"}),
        point("plant-02", plant, (4, 0), -0.004, 0.001, COUNTY_EAST,
              {"product_codes": "D5|W10"}),
        point("plant-03", plant, (2, 0), 0.005, -0.002, COUNTY_WEST,
              {"product_codes": "M11"}),
        point("inc-01", incidence, (0, 0), 0.001, 0.001, COUNTY_WEST,
              {"species": "mallard", "date": "2024-01-15"}),
        point("inc-02", incidence, (3, 0), -0.002, 0.003, COUNTY_EAST,
              {"species": "mallard", "date": "2024-03-02"}),
        point("inc-03", incidence, (1, 0), 0.003, -0.001, COUNTY_WEST,
              {"species": "canada_goose", "date": "2024-04-20"}),
        point("inc-04", incidence, (4, 0), 0.002, 0.002, COUNTY_EAST,
              {"species": "mallard", "date": "2024-08-05"}),
        point("inc-05", incidence, (2, 0), -0.001, 0.004, COUNTY_WEST,
              {"species": "canada_goose", "date": "2024-11-10"}),
        # species outside the grouping: exercises the ungrouped paths
        point("inc-06", incidence, (5, 0), 0.004, -0.003, COUNTY_EAST,
              {"species": "redhead", "date": "2024-06-01"}),
    ]


def fixture_boundaries() -> dict:
    geometry = fixture_geometry()
    features = []
    for county in geometry.counties():
        lats = []
        lons = []
        for cell in geometry.cells_in_county(county):
            lat, lon = geometry.centroid(cell)
            lats.append(lat)
            lons.append(lon)
        lo_lat, hi_lat = min(lats) - 0.05, max(lats) + 0.05
        lo_lon, hi_lon = min(lons) - 0.05, max(lons) + 0.05
        ring = [
            [lo_lon, lo_lat], [hi_lon, lo_lat], [hi_lon, hi_lat],
            [lo_lon, hi_lat], [lo_lon, lo_lat],
        ]
        features.append({
            "type": "Feature",
            "properties": {"fips": county},
            "geometry": {"type": "Polygon", "coordinates": [ring]},
        })
    return {"type": "FeatureCollection", "features": features}


_CONFIG_TEXT = """\
census: census.csv
size_classes: size_classes.csv
geometry: geometry.csv
glw: glw.csv
birds: birds.csv
population: population.csv
points: points.csv
prevalence: prevalence.csv
species_groups: species_groups.csv
worker_counts: worker_counts.csv
boundaries: boundaries.geojson
out: out
worker_employments:
  - livestock_workers
"""


def generate_fixture(directory) -> Path:
    """Write the full input bundle into ``directory``; returns the config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ingest.save_size_classes(fixture_schemes(),
                             directory / "size_classes.csv")
    ingest.save_census(redacted_census(), directory / "census.csv")
    ingest.save_geometry(fixture_geometry(), directory / "geometry.csv")
    ingest.save_gridded_layers(truth_glw(), LayerKind.GLW,
                               directory / "glw.csv")
    ingest.save_gridded_layers(fixture_birds(), LayerKind.BIRDS,
                               directory / "birds.csv")
    ingest.save_gridded_layers(fixture_population(), LayerKind.POPULATION,
                               directory / "population.csv")
    ingest.save_point_records(fixture_points(), directory / "points.csv")
    ingest.save_prevalence(fixture_prevalence(),
                           directory / "prevalence.csv")
    ingest.save_species_groups(SPECIES_GROUPS,
                               directory / "species_groups.csv")
    ingest.save_quarterly_counts(fixture_worker_counts(),
                                 directory / "worker_counts.csv")
    boundaries = directory / "boundaries.geojson"
    boundaries.write_text(
        json.dumps(fixture_boundaries(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    config = directory / "config.yaml"
    config.write_text(_CONFIG_TEXT, encoding="utf-8")
    return config
