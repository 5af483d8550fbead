"""Collocation spillover-risk surfaces and their county-level summaries.

The cell-level score is the product of a livestock density layer, the period
mean of weekly wild-bird abundance, and the period mean of weekly infection
prevalence.  County scores sum the county's cells; categories come from
percentile ranks with fixed cutoffs.  Surfaces for distinct (subtype, period)
pairs are independent; categorization needs the full county vector of its
period.
"""

from __future__ import annotations

import bisect
import datetime
import enum
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import ConsistencyError, MissingLayer
from .model import GridGeometry, GridLayer, PointRecord

#: Inclusive (first_week, last_week) spans defining the default periods:
#: calendar quarters over a 52-week year.
DEFAULT_PERIOD_BOUNDS: tuple[tuple[int, int], ...] = (
    (1, 13),
    (14, 26),
    (27, 39),
    (40, 52),
)

UNKNOWN_BIN = "UNKNOWN"


class RiskCategory(str, enum.Enum):
    VERY_HIGH = "VERY_HIGH"
    HIGH = "HIGH"
    MEDIUM = "MEDIUM"
    LOW = "LOW"


#: Best-to-worst order used by persistence ranking.
CATEGORY_ORDER = (
    RiskCategory.VERY_HIGH,
    RiskCategory.HIGH,
    RiskCategory.MEDIUM,
    RiskCategory.LOW,
)


def weeks_for_periods(
    bounds: Sequence[tuple[int, int]] = DEFAULT_PERIOD_BOUNDS,
) -> dict[int, list[int]]:
    """Map period id (1-based) to its list of weeks, validating the spans.

    Spans must be inclusive, within weeks 1..52, and strictly ascending
    without overlap; they need not cover the whole year.
    """
    if not bounds:
        raise ValueError("at least one period is required")
    out: dict[int, list[int]] = {}
    prev_end = 0
    for number, (start, end) in enumerate(bounds, start=1):
        if not 1 <= start <= end <= 52:
            raise ValueError(f"period {number}: bad week span ({start}, {end})")
        if start <= prev_end:
            raise ValueError(f"period {number}: overlaps the previous period")
        out[number] = list(range(start, end + 1))
        prev_end = end
    return out


def week_of_date(date: str | datetime.date) -> int:
    """Week of year in 1..52 from an ISO date; the last days fold into week 52."""
    if isinstance(date, str):
        date = datetime.date.fromisoformat(date)
    return min(52, (date.timetuple().tm_yday - 1) // 7 + 1)


def period_of_week(week: int, period_weeks: Mapping[int, Sequence[int]]) -> int | None:
    for period, weeks in period_weeks.items():
        if week in weeks:
            return period
    return None


@dataclass(frozen=True)
class RiskSurface:
    """Cell scores (sparse, zeros omitted) and county aggregates for one
    (subtype, period) pair.  County scores are exactly the sums of their
    cells' scores and cover every county of the geometry."""

    subtype: str
    period: int
    cell_scores: dict[tuple[int, int], float]
    county_scores: dict[str, float]

    def __post_init__(self):
        for cell, score in self.cell_scores.items():
            if score < 0:
                raise ValueError(f"negative risk score {score} at {cell}")


def _period_mean(
    weekly: Mapping[int, GridLayer | float],
    weeks: Sequence[int],
    cell: tuple[int, int],
) -> float:
    total = 0.0
    for week in weeks:
        layer = weekly[week]
        total += layer if isinstance(layer, (int, float)) else layer.value(cell)
    return total / len(weeks)


def _require_weeks(
    weekly: Mapping[int, GridLayer | float], weeks: Sequence[int], label: str
) -> None:
    missing = [w for w in weeks if w not in weekly]
    if missing:
        raise MissingLayer(f"{label} has no data for weeks {missing}")


def compute_risk_surface(
    livestock_layer: GridLayer,
    weekly_abundance: Mapping[int, GridLayer],
    prevalence: Mapping[int, GridLayer | float],
    subtype: str,
    period: int,
    geometry: GridGeometry,
    period_weeks: Mapping[int, Sequence[int]] | None = None,
) -> RiskSurface:
    """Cell-level risk scores for one subtype and period, with county sums.

    Per cell: score = density * mean weekly abundance * mean weekly
    prevalence, the means taken over the period's weeks.  Prevalence entries
    may be plain floats, meaning a spatially constant value for that week.

    Parameters
    ----------
    livestock_layer : GridLayer
        Head density per cell for the subtype.
    weekly_abundance : mapping week -> GridLayer
        Bird abundance; must cover every week of the period.
    prevalence : mapping week -> GridLayer or float
        Infection prevalence; must cover every week of the period.
    period : int
        1-based period id; must exist in ``period_weeks``.

    Raises
    ------
    MissingLayer
        If the density layer is absent or a period week lacks abundance or
        prevalence data.
    """
    if livestock_layer is None:
        raise MissingLayer(f"no livestock density layer for subtype {subtype}")
    if period_weeks is None:
        period_weeks = weeks_for_periods()
    if period not in period_weeks:
        raise ValueError(f"unknown period {period}")
    weeks = period_weeks[period]
    _require_weeks(weekly_abundance, weeks, "abundance")
    _require_weeks(prevalence, weeks, "prevalence")

    cell_scores: dict[tuple[int, int], float] = {}
    county_scores = {county: 0.0 for county in geometry.counties()}
    for cell, info in geometry.cells.items():
        density = livestock_layer.value(cell)
        if density == 0.0:
            continue
        score = (
            density
            * _period_mean(weekly_abundance, weeks, cell)
            * _period_mean(prevalence, weeks, cell)
        )
        if score != 0.0:
            cell_scores[cell] = score
    for county in county_scores:
        county_scores[county] = math.fsum(
            cell_scores.get(cell, 0.0) for cell in geometry.cells_in_county(county)
        )
    return RiskSurface(
        subtype=subtype,
        period=period,
        cell_scores=cell_scores,
        county_scores=county_scores,
    )


def scenario_surface(
    subtype_layers: Iterable[GridLayer],
    weekly_abundance: Mapping[int, GridLayer],
    prevalence: Mapping[int, GridLayer | float],
    period: int,
    geometry: GridGeometry,
    period_weeks: Mapping[int, Sequence[int]] | None = None,
    label: str = "all",
) -> RiskSurface:
    """Risk surface for a whole livestock type: densities summed per cell."""
    layers = list(subtype_layers)
    if not layers:
        raise MissingLayer("no subtype layers to combine")
    combined: dict[tuple[int, int], float] = {}
    for layer in layers:
        for cell, value in layer.values.items():
            combined[cell] = combined.get(cell, 0.0) + value
    return compute_risk_surface(
        GridLayer(key=label, values=combined),
        weekly_abundance,
        prevalence,
        label,
        period,
        geometry,
        period_weeks,
    )


# -- percentile categorization ---------------------------------------------


def category_for_rank(rank: float) -> RiskCategory:
    if rank >= 95:
        return RiskCategory.VERY_HIGH
    if rank >= 90:
        return RiskCategory.HIGH
    if rank >= 75:
        return RiskCategory.MEDIUM
    return RiskCategory.LOW


def percentile_ranks(scores: Mapping[str, float]) -> dict[str, float]:
    """Percentile rank per county: 100 * (#strictly lower) / (N - 1).

    Ties share a rank; a single county ranks 100.
    """
    if not scores:
        raise ValueError("at least one county is required")
    n = len(scores)
    if n == 1:
        return {county: 100.0 for county in scores}
    ordered = sorted(scores.values())
    ranks: dict[str, float] = {}
    for county, score in scores.items():
        lower = _count_strictly_lower(ordered, score)
        ranks[county] = 100.0 * lower / (n - 1)
    return ranks


def _count_strictly_lower(ordered: list[float], score: float) -> int:
    return bisect.bisect_left(ordered, score)


def categorize_scores(scores: Mapping[str, float]) -> dict[str, RiskCategory]:
    """Risk category per county from percentile ranks of the given scores."""
    return {
        county: category_for_rank(rank)
        for county, rank in percentile_ranks(scores).items()
    }


def categorize(surface: RiskSurface) -> dict[str, RiskCategory]:
    return categorize_scores(surface.county_scores)


# -- multi-period summaries ------------------------------------------------


def _check_same_counties(per_period: Mapping[int, Mapping[str, object]]) -> list[str]:
    if not per_period:
        raise ValueError("at least one period is required")
    periods = sorted(per_period)
    counties = set(per_period[periods[0]])
    for period in periods[1:]:
        if set(per_period[period]) != counties:
            raise ConsistencyError(
                f"period {period} covers a different county set than period {periods[0]}"
            )
    return sorted(counties)


def persistence_rank(
    categories_by_period: Mapping[int, Mapping[str, RiskCategory]],
) -> list[str]:
    """Counties ordered by how persistently they hold high-risk categories.

    Sort key: count of VERY_HIGH periods descending, then HIGH, MEDIUM, LOW;
    remaining ties broken by county FIPS ascending.
    """
    counties = _check_same_counties(categories_by_period)

    def profile(county: str) -> tuple:
        counts = {category: 0 for category in CATEGORY_ORDER}
        for categories in categories_by_period.values():
            counts[categories[county]] += 1
        return tuple(-counts[category] for category in CATEGORY_ORDER) + (county,)

    return sorted(counties, key=profile)


@dataclass(frozen=True)
class PeakPeriod:
    period: int
    no_risk: bool


def peak_period(
    scores_by_period: Mapping[int, Mapping[str, float]],
) -> dict[str, PeakPeriod]:
    """Period of maximum county score; ties take the earliest period.

    A county with zero score in every period reports the first period with
    the ``no_risk`` marker set.
    """
    counties = _check_same_counties(scores_by_period)
    periods = sorted(scores_by_period)
    out: dict[str, PeakPeriod] = {}
    for county in counties:
        best_period = periods[0]
        best_score = scores_by_period[best_period][county]
        for period in periods[1:]:
            score = scores_by_period[period][county]
            if score > best_score:
                best_period, best_score = period, score
        out[county] = PeakPeriod(period=best_period, no_risk=best_score == 0.0)
    return out


def incidence_concordance(
    categories_by_period: Mapping[int, Mapping[str, RiskCategory]],
    incidence: Iterable[PointRecord],
    period_weeks: Mapping[int, Sequence[int]] | None = None,
) -> dict[str, int]:
    """Histogram of case counts per risk category of the (county, period) hit.

    Each case's date resolves to a week and then to a period; the case lands
    in the category that county held in that period.  Cases whose county or
    period is absent from the categorization land in the UNKNOWN bin, so the
    histogram always sums to the number of cases.
    """
    if period_weeks is None:
        period_weeks = weeks_for_periods()
    histogram = {category.value: 0 for category in CATEGORY_ORDER}
    histogram[UNKNOWN_BIN] = 0
    for case in incidence:
        date = case.attributes.get("date")
        if date is None:
            raise ValueError(f"incidence record {case.id} has no date attribute")
        period = period_of_week(week_of_date(date), period_weeks)
        categories = categories_by_period.get(period) if period is not None else None
        if categories is None or case.county not in categories:
            histogram[UNKNOWN_BIN] += 1
        else:
            histogram[categories[case.county].value] += 1
    return histogram
