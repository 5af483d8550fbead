"""Validation statistics for synthesized farm datasets.

Four independent checks: CAFO-to-farm matching by great-circle distance,
state-total alignment against census tables, top-K recall of case species
groups under bird-abundance ranking, and county worker-count comparison
against quarterly reference series.  All functions are pure; county-level
computations can run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import fmean, pstdev
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConsistencyError, UnknownCell
from .model import (
    ALL_SUBTYPE,
    COUNTRY_REGION,
    CountTable,
    FarmRecord,
    GridGeometry,
    GridLayer,
    Level,
    PointRecord,
    state_of_county,
)

EARTH_RADIUS_MILES = 3958.7613

#: Floor applied to distances before inversion; 1/d is undefined at d = 0.
MIN_MATCH_DISTANCE_MILES = 0.1

#: Head-count minimums for selecting large farms in the CAFO comparison.
#: Two documented sets; the second targets substantially larger operations.
#: Both are artifact configuration choices, adjustable per run.
SIZE_THRESHOLD_PRESETS: dict[str, dict[str, int]] = {
    "standard": {"cattle": 100, "hogs": 10000, "chickens": 200},
    "large": {"cattle": 500, "hogs": 25000, "chickens": 1000},
}


def haversine_miles(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in miles between two (lat, lon) points in degrees.

    Symmetric, and exactly zero for identical inputs.  Coordinates are assumed
    to be in range; out-of-range points are rejected at load time.
    """
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    h = (
        math.sin((lat2 - lat1) / 2.0) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2
    )
    # Clamp guards asin against rounding slightly above 1 for antipodes.
    return 2.0 * EARTH_RADIUS_MILES * math.asin(min(1.0, math.sqrt(h)))


# -- CAFO matching ---------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching CAFO points against farm locations.

    ``pairs`` holds (cafo_id, farm_id, distance_miles) with exactly
    min(#cafos, #farms) entries; every id appears at most once.
    """

    pairs: list[tuple[str, str, float]]
    unmatched_cafos: list[str] = field(default_factory=list)
    unmatched_farms: list[str] = field(default_factory=list)

    @property
    def distances(self) -> list[float]:
        return [d for _, _, d in self.pairs]

    def total_weight(self, min_distance: float = MIN_MATCH_DISTANCE_MILES) -> float:
        return math.fsum(1.0 / max(d, min_distance) for d in self.distances)


def filter_farms_by_threshold(
    farms: Iterable[FarmRecord], thresholds: Mapping[str, int]
) -> list[FarmRecord]:
    """Farms whose livestock has a threshold and whose head count meets it.

    Livestock types absent from ``thresholds`` are excluded entirely: no
    threshold means the type is not part of the comparison.
    """
    return [
        f
        for f in farms
        if f.livestock in thresholds and f.total_heads >= thresholds[f.livestock]
    ]


def match_cafos(
    cafos: Sequence[PointRecord],
    farms: Sequence[FarmRecord],
    geometry: GridGeometry,
    min_distance: float = MIN_MATCH_DISTANCE_MILES,
) -> MatchResult:
    """Maximum-weight perfect matching of CAFO points to farm locations.

    Each farm sits at the centroid of its assigned grid cell.  The complete
    bipartite graph carries edge weight 1/max(d, ``min_distance``) with d the
    haversine distance in miles, and the matching covers the smaller side
    exactly (min(#cafos, #farms) pairs).  An empty side yields an empty
    result with everything unmatched, not a failure.

    Parameters
    ----------
    cafos : sequence of PointRecord
        CAFO locations; ids must be unique.
    farms : sequence of FarmRecord
        Pre-filtered farms (see :func:`filter_farms_by_threshold`); each must
        carry an assigned cell present in ``geometry``.
    geometry : GridGeometry
        Supplies cell centroids.

    Returns
    -------
    MatchResult
        Pairs sorted by CAFO id; unmatched id lists sorted.
    """
    cafos = sorted(cafos, key=lambda c: c.id)
    farms = sorted(farms, key=lambda f: f.id)
    if not cafos or not farms:
        return MatchResult(
            pairs=[],
            unmatched_cafos=[c.id for c in cafos],
            unmatched_farms=[f.id for f in farms],
        )

    locations = []
    for farm in farms:
        if farm.cell is None:
            raise ConsistencyError(f"farm {farm.id} has no assigned cell")
        if farm.cell not in geometry:
            raise UnknownCell(f"farm {farm.id} assigned to unknown cell {farm.cell}")
        locations.append(geometry.centroid(farm.cell))

    dist = np.empty((len(cafos), len(farms)))
    for i, cafo in enumerate(cafos):
        for j, loc in enumerate(locations):
            dist[i, j] = haversine_miles((cafo.lat, cafo.lon), loc)
    weight = 1.0 / np.maximum(dist, min_distance)

    rows, cols = linear_sum_assignment(weight, maximize=True)
    pairs = sorted(
        (cafos[i].id, farms[j].id, float(dist[i, j]))
        for i, j in zip(rows, cols)
    )
    matched_cafos = {p[0] for p in pairs}
    matched_farms = {p[1] for p in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_cafos=[c.id for c in cafos if c.id not in matched_cafos],
        unmatched_farms=[f.id for f in farms if f.id not in matched_farms],
    )


def matched_distance_percentile(result: MatchResult, q: float) -> float:
    """q-th percentile (linear interpolation) of matched pair distances."""
    if not result.pairs:
        raise ValueError("no matched pairs to take a percentile of")
    return float(np.percentile(result.distances, q))


def distance_histogram(
    result: MatchResult, bin_width: float = 1.0
) -> list[tuple[float, float, int, float]]:
    """Fixed-width histogram of matched distances with a cumulative fraction.

    Returns rows (bin_lo, bin_hi, count, cumulative_fraction) covering
    [0, bin_width), [bin_width, 2*bin_width), ... up to the largest distance;
    the last cumulative fraction is exactly 1.0.  Empty result yields no rows.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    distances = result.distances
    if not distances:
        return []
    n_bins = int(max(distances) // bin_width) + 1
    counts = [0] * n_bins
    for d in distances:
        counts[min(int(d // bin_width), n_bins - 1)] += 1
    rows = []
    seen = 0
    for k, count in enumerate(counts):
        seen += count
        rows.append((k * bin_width, (k + 1) * bin_width, count, seen / len(distances)))
    return rows


# -- census alignment ------------------------------------------------------


def mean_normalized_difference(a: float, b: float) -> float:
    """Percentage absolute difference normalized by the mean of the pair.

    100*|a - b| / ((a + b)/2); defined as 0 when both values are 0.
    """
    if a == 0 and b == 0:
        return 0.0
    return 100.0 * abs(a - b) / ((a + b) / 2.0)


def census_alignment(
    farms: Iterable[FarmRecord], census_tables: Iterable[CountTable]
) -> dict[tuple[str, str, str], float]:
    """Mean-normalized percentage gap of synthesized vs census state totals.

    For every state-level table (national aggregate excluded) with a known
    head total, compares it against the summed heads of the synthesized farms
    in that state for the same (livestock, subtype).  The whole-type subtype
    compares against total farm heads.  Normalization uses the mean of the
    two values being compared, not a mean over states.

    Returns
    -------
    dict
        (state_fips, livestock, subtype) -> percentage difference.
    """
    ds_totals: dict[tuple[str, str, str], int] = {}

    def add(key: tuple[str, str, str], heads: int) -> None:
        ds_totals[key] = ds_totals.get(key, 0) + heads

    for farm in farms:
        state = state_of_county(farm.county)
        for subtype, heads in farm.heads_by_subtype.items():
            add((state, farm.livestock, subtype), heads)
        if ALL_SUBTYPE not in farm.heads_by_subtype:
            add((state, farm.livestock, ALL_SUBTYPE), farm.total_heads)

    out: dict[tuple[str, str, str], float] = {}
    tables = sorted(
        (
            t
            for t in census_tables
            if t.level is Level.STATE
            and t.region != COUNTRY_REGION
            and t.total.heads is not None
        ),
        key=lambda t: (t.region, t.livestock, t.subtype),
    )
    for table in tables:
        key = (table.region, table.livestock, table.subtype)
        out[key] = mean_normalized_difference(ds_totals.get(key, 0), table.total.heads)
    return out


# -- abundance recall ------------------------------------------------------


def topk_recall(
    mean_abundance: Mapping[str, float],
    cases: Iterable[str],
    grouping: Mapping[str, str],
    k: int,
) -> float:
    """Fraction of case species groups found in the top-K abundant groups.

    Groups are ranked by summed mean abundance, descending, ties broken by
    group name ascending.  Species absent from ``grouping`` are ignored;
    grouped species absent from ``mean_abundance`` contribute 0.  An empty
    case set yields 1.0 (vacuous recall).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    totals: dict[str, float] = {}
    for species, group in grouping.items():
        totals[group] = totals.get(group, 0.0) + float(mean_abundance.get(species, 0.0))
    case_groups = set(cases)
    if not case_groups:
        return 1.0
    ranked = sorted(totals, key=lambda g: (-totals[g], g))
    top = set(ranked[:k])
    return len(case_groups & top) / len(case_groups)


# -- worker comparison -----------------------------------------------------


@dataclass(frozen=True)
class WorkerComparison:
    """Per-county comparison of synthesized worker counts vs a quarterly series."""

    county: str
    ds_count: float
    reference_mean: float
    difference: float
    cv: float


@dataclass(frozen=True)
class WorkerComparisonResult:
    rows: list[WorkerComparison]
    ds_only_counties: list[str]
    reference_only_counties: list[str]


def quarterly_cv(quarters: Sequence[float]) -> float:
    """Coefficient of variation (population stddev / mean) over quarters.

    Returns 0.0 for an all-zero series, where the ratio is otherwise
    undefined.
    """
    if not quarters:
        raise ValueError("at least one quarter is required")
    mean = fmean(quarters)
    if mean == 0:
        return 0.0
    return pstdev(quarters) / mean


def worker_comparison(
    ds_layers: Iterable[GridLayer],
    geometry: GridGeometry,
    reference: Mapping[str, Sequence[float]],
) -> WorkerComparisonResult:
    """County-level worker counts vs mean quarterly reference counts.

    Synthesized counts sum the given layers over each county's grid cells.
    For counties present in both sources the row reports the synthesized
    count, the mean of the quarterly reference series, their difference
    (synthesized minus reference mean), and the series' coefficient of
    variation.  Counties present in only one source are listed separately
    rather than compared.
    """
    layers = list(ds_layers)
    rows: list[WorkerComparison] = []
    ds_only: list[str] = []
    counties = geometry.counties()
    for county in counties:
        cells = geometry.cells_in_county(county)
        ds_count = math.fsum(layer.value(c) for layer in layers for c in cells)
        if county not in reference:
            ds_only.append(county)
            continue
        quarters = reference[county]
        if not quarters:
            raise ValueError(f"county {county}: empty quarterly series")
        mean = fmean(quarters)
        rows.append(
            WorkerComparison(
                county=county,
                ds_count=ds_count,
                reference_mean=mean,
                difference=ds_count - mean,
                cv=quarterly_cv(quarters),
            )
        )
    reference_only = sorted(set(reference) - set(counties))
    return WorkerComparisonResult(rows, ds_only, reference_only)
