"""Core domain types: schemes, tables, alignment, bound derivation."""

import math

import pytest
from hypothesis import given, strategies as st

from digisim.errors import InconsistentBounds, StateClassStraddlesCountyClass
from digisim.model import (
    ALL_SUBTYPE,
    TOTAL_INDEX,
    CountCell,
    CountTable,
    CellInfo,
    FarmRecord,
    GridGeometry,
    GridLayer,
    Level,
    SizeClass,
    SizeClassScheme,
    align_size_classes,
    derive_bounds,
    resolve_open_cap,
    state_of_county,
)


def scheme(livestock, *windows):
    return SizeClassScheme(livestock, tuple(SizeClass(a, b) for a, b in windows))


def table(by_class, total=CountCell(None, None), level=Level.STATE,
          region="48", livestock="cattle", subtype=ALL_SUBTYPE):
    return CountTable(level=level, region=region, livestock=livestock,
                      subtype=subtype, by_class=by_class, total=total)


class TestSizeClassScheme:
    def test_windows_sorted_and_disjoint(self):
        s = scheme("cattle", (1, 24), (25, 49), (50, None))
        assert len(s) == 3
        assert s.classes[2].is_open

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            scheme("cattle", (1, 24), (20, 49))

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            scheme("cattle", (25, 49), (1, 24))

    def test_open_class_must_be_last(self):
        with pytest.raises(ValueError):
            SizeClassScheme("cattle", (SizeClass(1, None), SizeClass(50, 99)))

    def test_inverted_window_rejected(self):
        with pytest.raises(ValueError):
            SizeClass(10, 5)

    def test_class_of(self):
        s = scheme("cattle", (1, 24), (25, 49), (50, None))
        assert s.class_of(1) == 0
        assert s.class_of(24) == 0
        assert s.class_of(25) == 1
        assert s.class_of(50) == 2
        assert s.class_of(10 ** 9) == 2
        assert s.class_of(0) is None

    def test_gap_in_coverage_allowed(self):
        s = scheme("cattle", (1, 24), (50, 99))
        assert s.class_of(30) is None


class TestCountCell:
    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            CountCell(-1, 0)
        with pytest.raises(ValueError):
            CountCell(0, -1)

    def test_zero_farms_zero_heads(self):
        assert CountCell(0, 0).heads == 0
        assert CountCell(0, None).heads is None
        with pytest.raises(ValueError):
            CountCell(0, 5)

    def test_missing_values_allowed(self):
        c = CountCell(12, None)
        assert c.farms == 12 and c.heads is None


class TestCountTable:
    def test_with_heads_marks_imputed(self):
        t = table({0: CountCell(3, None)}, total=CountCell(4, None))
        t2 = t.with_heads(0, 40)
        assert t2.by_class[0].heads == 40
        assert t2.imputed == {0}
        t3 = t2.with_heads(TOTAL_INDEX, 90)
        assert t3.total.heads == 90
        assert t3.imputed == {0, TOTAL_INDEX}
        # original untouched
        assert t.by_class[0].heads is None and t.imputed == frozenset()

    def test_sum_consistency(self):
        t = table({0: CountCell(1, 10), 1: CountCell(2, 30)}, total=CountCell(3, 40))
        assert t.check_sum_consistency()
        bad = table({0: CountCell(1, 10), 1: CountCell(2, 30)}, total=CountCell(3, 41))
        assert not bad.check_sum_consistency()
        # missing entries are vacuously consistent
        assert table({0: CountCell(1, None)}, total=CountCell(1, 5)).check_sum_consistency()

    def test_missing_class_heads_sorted(self):
        t = table({2: CountCell(1, None), 0: CountCell(1, None), 1: CountCell(1, 7)})
        assert t.missing_class_heads() == [0, 2]
        assert t.has_missing()


class TestAlignSizeClasses:
    def test_additive_merge(self):
        state = scheme("cattle", (1, 999), (1000, 2499), (2500, None))
        county = scheme("cattle", (1, 999), (1000, None))
        t = table({0: CountCell(7, 900), 1: CountCell(3, 4000), 2: CountCell(1, 3000)})
        merged = align_size_classes(state, county, t)
        assert merged.by_class[1] == CountCell(4, 7000)

    def test_identity_case(self):
        s = scheme("cattle", (1, 999), (1000, None))
        t = table({0: CountCell(7, 900), 1: CountCell(4, 7000)})
        merged = align_size_classes(s, s, t)
        assert merged.by_class == t.by_class
        assert merged.total == t.total

    def test_missing_propagates(self):
        state = scheme("cattle", (1, 9), (10, 19))
        county = scheme("cattle", (1, 19),)
        t = table({0: CountCell(2, None), 1: CountCell(1, 500 // 25)})
        merged = align_size_classes(state, county, t)
        assert merged.by_class[0].farms == 3
        assert merged.by_class[0].heads is None

    def test_straddle_raises(self):
        state = scheme("cattle", (500, 2999),)
        county = scheme("cattle", (500, 999), (1000, None))
        t = table({0: CountCell(1, 600)})
        with pytest.raises(StateClassStraddlesCountyClass):
            align_size_classes(state, county, t)

    def test_open_nests_only_in_open(self):
        state = scheme("cattle", (1000, None),)
        county = scheme("cattle", (1, 999), (1000, None))
        t = table({0: CountCell(2, 5000)})
        merged = align_size_classes(state, county, t)
        assert merged.by_class[1] == CountCell(2, 5000)

    def test_state_class_wider_than_any_county_class(self):
        state = scheme("cattle", (1, 30),)
        county = scheme("cattle", (1, 9),)
        t = table({0: CountCell(1, 5)})
        with pytest.raises(ValueError):
            align_size_classes(state, county, t)

    @given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 5000)),
                    min_size=1, max_size=6))
    def test_merge_preserves_grand_totals(self, counts):
        windows = [(1, 9), (10, 19), (20, 49), (50, 99), (100, 199), (200, None)]
        state = scheme("cattle", *windows[:len(counts)])
        county = scheme("cattle", (1, 49), (50, None))
        cells = {}
        for i, (f, h) in enumerate(counts):
            if f == 0:
                cells[i] = CountCell(0, 0)
            else:
                cells[i] = CountCell(f, h)
        merged = align_size_classes(state, county, table(cells))
        assert (sum(c.farms for c in merged.by_class.values())
                == sum(c.farms for c in cells.values()))
        assert (sum(c.heads for c in merged.by_class.values())
                == sum(c.heads for c in cells.values()))


class TestDeriveBounds:
    def test_direct_class_window_product(self):
        s = scheme("cattle", (10, 19),)
        t = table({0: CountCell(3, None)})
        assert derive_bounds(t, s)[0] == (30, 57)

    def test_zero_farms(self):
        s = scheme("cattle", (10, 19),)
        t = table({0: CountCell(0, None)})
        assert derive_bounds(t, s)[0] == (0, 0)

    def test_refinement_conflict(self):
        s = scheme("cattle", (10, 19),)
        state = table({0: CountCell(3, None)}, total=CountCell(3, None))
        counties = (
            table({}, total=CountCell(2, 40), level=Level.COUNTY, region="48001"),
            table({}, total=CountCell(1, 25), level=Level.COUNTY, region="48003"),
        )
        with pytest.raises(InconsistentBounds):
            derive_bounds(state, s, refining_tables=counties)

    def test_refinement_raises_lower_bound(self):
        s = scheme("cattle", (10, 19),)
        state = table({0: CountCell(3, None)}, total=CountCell(3, None))
        counties = (
            table({}, total=CountCell(2, 40), level=Level.COUNTY, region="48001"),
        )
        b = derive_bounds(state, s, refining_tables=counties)
        assert b[TOTAL_INDEX] == (40, 57)
        assert b[0] == (30, 57)

    def test_class_level_refinement(self):
        s = scheme("cattle", (10, 19),)
        state = table({0: CountCell(3, None)})
        counties = (
            table({0: CountCell(2, 35)}, level=Level.COUNTY, region="48001"),
        )
        assert derive_bounds(state, s, refining_tables=counties)[0] == (35, 57)

    def test_other_group_refinements_ignored(self):
        s = scheme("cattle", (10, 19),)
        state = table({0: CountCell(3, None)})
        other = (
            table({0: CountCell(2, 38)}, level=Level.COUNTY, region="48001",
                  livestock="hogs"),
        )
        assert derive_bounds(state, s, refining_tables=other)[0] == (30, 57)

    def test_open_class_uses_resolved_cap(self):
        s = scheme("cattle", (1, 999), (1000, None))
        t = table({1: CountCell(2, None)})
        b = derive_bounds(t, s, enclosing_total=500000)
        assert b[1] == (2000, 500000)
        b2 = derive_bounds(t, s, enclosing_total=None)
        assert b2[1] == (2000, 1000 * 2 * 100)

    def test_total_bound_from_classes(self):
        s = scheme("cattle", (1, 9), (10, 19))
        t = table({0: CountCell(2, 6), 1: CountCell(3, None)}, total=CountCell(5, None))
        b = derive_bounds(t, s)
        assert b[1] == (30, 57)
        assert b[TOTAL_INDEX] == (36, 63)

    def test_total_bound_without_classes_needs_enclosing(self):
        s = scheme("cattle", (1, 9),)
        t = table({}, total=CountCell(4, None))
        assert derive_bounds(t, s, enclosing_total=77)[TOTAL_INDEX] == (0, 77)
        with pytest.raises(ValueError):
            derive_bounds(t, s)

    def test_no_missing_entries_empty_result(self):
        s = scheme("cattle", (1, 9),)
        t = table({0: CountCell(2, 10)}, total=CountCell(2, 10))
        assert derive_bounds(t, s) == {}

    @given(st.lists(st.tuples(st.integers(0, 8), st.booleans()),
                    min_size=1, max_size=4),
           st.integers(0, 3))
    def test_true_values_lie_within_bounds(self, spec_rows, seed):
        # build a table from known per-farm sizes, then redact and re-bound
        import random
        rng = random.Random(seed)
        windows = [(1, 9), (10, 19), (20, 49), (50, 99)]
        s = scheme("cattle", *windows[:len(spec_rows)])
        cells, truth = {}, {}
        for i, (farms, redact) in enumerate(spec_rows):
            w = windows[i]
            heads = sum(rng.randint(w[0], w[1]) for _ in range(farms))
            truth[i] = heads
            cells[i] = CountCell(farms, None if redact else heads)
        t = table(cells, total=CountCell(sum(f for f, _ in spec_rows), None))
        bounds = derive_bounds(t, s)
        for i, (lo, up) in bounds.items():
            assert lo <= up
            true = sum(truth.values()) if i == TOTAL_INDEX else truth[i]
            assert lo <= true <= up


class TestResolveOpenCap:
    def test_dominant_term_wins(self):
        assert resolve_open_cap(1000, 2, 500000) == 500000
        assert resolve_open_cap(1000, 2, None) == 200000
        assert resolve_open_cap(1000, 0, None) == 100000


class TestGrid:
    def geom(self):
        return GridGeometry({
            (0, 0): CellInfo(30.0, -100.0, "48001"),
            (1, 0): CellInfo(30.0, -99.9, "48001"),
            (2, 0): CellInfo(30.0, -99.8, "48003"),
        })

    def test_county_index(self):
        g = self.geom()
        assert g.counties() == ["48001", "48003"]
        assert g.cells_in_county("48001") == [(0, 0), (1, 0)]
        assert g.county_of((2, 0)) == "48003"
        assert (0, 0) in g and (9, 9) not in g

    def test_central_cell(self):
        g = GridGeometry({
            (0, 0): CellInfo(30.0, -100.0, "48001"),
            (1, 0): CellInfo(30.0, -99.9, "48001"),
            (2, 0): CellInfo(30.0, -99.8, "48001"),
        })
        assert g.central_cell("48001") == (1, 0)

    def test_central_cell_tie_lowest_id(self):
        g = GridGeometry({
            (0, 0): CellInfo(30.0, -100.0, "48001"),
            (1, 0): CellInfo(30.0, -99.8, "48001"),
        })
        # both cells equidistant from the mean centroid; lowest id wins
        assert g.central_cell("48001") == (0, 0)

    def test_layer_default_zero_and_nonnegative(self):
        layer = GridLayer("cattle", {(0, 0): 130.0})
        assert layer.value((0, 0)) == 130.0
        assert layer.value((5, 5)) == 0.0
        assert layer.total() == 130.0
        with pytest.raises(ValueError):
            GridLayer("cattle", {(0, 0): -1.0})


class TestFarmRecord:
    def test_total_heads_and_assignment(self):
        f = FarmRecord("F1", "48001", "cattle", 0, {"beef": 30, "milk": 12})
        assert f.total_heads == 42
        assert f.cell is None
        g = f.assigned_to((3, 4))
        assert g.cell == (3, 4) and f.cell is None


def test_state_of_county():
    assert state_of_county("48001") == "48"
    assert state_of_county("01005") == "01"
