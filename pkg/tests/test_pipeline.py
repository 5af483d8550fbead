"""End-to-end tests for the pipeline orchestrator on the bundled fixture.

One full ``all`` run is shared by the read-only assertions; scenarios that
mutate inputs (GLW dropout, county filters, crafted censuses) build their
own small workspaces.
"""

import csv
import hashlib
import json
import os
from pathlib import Path
from types import SimpleNamespace

import pytest

from digisim import generate_fixture, load_config, run_pipeline
from digisim.errors import ConfigError, MissingPrerequisite
from digisim.fixture import fixture_geometry, fixture_schemes, truth_census, truth_farms
from digisim.ingest import (
    LayerKind,
    load_assignments,
    load_census,
    load_farms,
    save_census,
    save_geometry,
    save_gridded_layers,
    save_size_classes,
)
from digisim.model import (
    CellInfo,
    CountCell,
    CountTable,
    GridGeometry,
    GridLayer,
    Level,
    SizeClass,
    SizeClassScheme,
)
from digisim.pipeline import STAGES, PipelineRun, apply_overrides


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def tree_digests(root, skip=()):
    """Relative path -> sha256 for every file under ``root``."""
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            rel = str(path.relative_to(root))
            if rel in skip:
                continue
            out[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture_run")
    config_path = generate_fixture(root)
    config = load_config(config_path)
    run = PipelineRun(config)
    ok = run.run_all()
    return SimpleNamespace(
        root=root, config_path=config_path, config=config, run=run, ok=ok,
        out=config.out_dir)


class TestFullRun:
    def test_all_stages_complete(self, full_run):
        assert full_run.ok
        manifest = read_json(full_run.out / "manifest.json")
        assert set(manifest["stages"]) == set(STAGES) | {"all"}
        statuses = {name: entry["status"]
                    for name, entry in manifest["stages"].items()}
        assert set(statuses.values()) == {"complete"}
        assert read_json(full_run.out / "errors.json") == {"errors": []}

    def test_manifest_input_digests(self, full_run):
        manifest = read_json(full_run.out / "manifest.json")
        assert set(manifest["inputs"]) == {
            "birds", "boundaries", "census", "geometry", "glw", "points",
            "population", "prevalence", "size_classes", "species_groups",
            "worker_counts",
        }
        for entry in manifest["inputs"].values():
            digest = hashlib.sha256(Path(entry["path"]).read_bytes()).hexdigest()
            assert digest == entry["sha256"]
        assert len(manifest["config_hash"]) == 64

    def test_no_temp_file_residue(self, full_run):
        stray = [p for p in full_run.out.rglob("*") if ".tmp-" in p.name]
        assert stray == []

    def test_gapfill_recovers_census_exactly(self, full_run):
        filled = (full_run.out / "gapfill" / "census_filled.csv").read_bytes()
        reference = full_run.root / "truth_census.csv"
        save_census(truth_census(), reference)
        assert filled == reference.read_bytes()

    def test_gapfill_report_rows(self, full_run):
        rows = read_rows(full_run.out / "gapfill" / "gapfill_report.csv")
        ilp = [r for r in rows if r["stage"] != "COUNTY_BY_SIZE"]
        ipf = [r for r in rows if r["stage"] == "COUNTY_BY_SIZE"]
        assert len(ilp) == 6 and len(ipf) == 4
        for row in ilp:
            assert row["status"] == "filled"
            assert int(row["lambda0"]) >= 0
        for row in ipf:
            assert row["status"] == "CONVERGED"
            assert row["lambda0"] == ""
            assert int(row["unknowns"]) == 1
        assert {r["group"] for r in ipf} == {
            "cattle/all/48", "cattle/beef/48", "cattle/milk/48", "hogs/all/48"}

    def test_generated_farms_match_truth_structure(self, full_run):
        farms = load_farms(full_run.out / "genfarms" / "farms.csv")
        truth = truth_farms()
        assert len(farms) == len(truth)

        def census_shape(records):
            counts: dict = {}
            heads: dict = {}
            for farm in records:
                key = (farm.county, farm.livestock, farm.size_class)
                counts[key] = counts.get(key, 0) + 1
                for subtype, n in farm.heads_by_subtype.items():
                    skey = (farm.county, farm.livestock, subtype)
                    heads[skey] = heads.get(skey, 0) + n
            return counts, heads

        schemes = fixture_schemes()
        for farm in farms:
            scheme = schemes[farm.livestock]
            assert scheme.class_of(farm.total_heads) == farm.size_class
        assert census_shape(farms) == census_shape(truth)

    def test_assignments_cover_farms_within_county(self, full_run):
        farms = load_farms(full_run.out / "genfarms" / "farms.csv")
        assignment = load_assignments(full_run.out / "assign" / "assignments.csv")
        geometry = fixture_geometry()
        assert set(assignment) == {farm.id for farm in farms}
        for farm in farms:
            cell = assignment[farm.id]
            assert cell in geometry.cells_in_county(farm.county)

    def test_alignment_report_values(self, full_run):
        rows = read_rows(full_run.out / "assign" / "alignment_report.csv")
        seen = {(r["county"], r["livestock"]): r for r in rows}
        assert set(seen) == {("48001", "cattle"), ("48001", "hogs"),
                             ("48003", "cattle"), ("48003", "hogs")}
        # optimal max deviations against the truth-derived GLW layer; hog
        # farms get smoothed to the class mean, hence the nonzero entries
        expected = {("48001", "cattle"): 1.0, ("48001", "hogs"): 150.0,
                    ("48003", "cattle"): 12.0, ("48003", "hogs"): 0.0}
        for key, row in seen.items():
            assert row["status"] == "OPTIMAL"
            assert float(row["lambda5"]) == expected[key]
            assert float(row["pearson_r"]) > 0.9

    def test_validation_report(self, full_run):
        report = read_json(full_run.out / "validate" / "validation_report.json")
        alignment = report["census_alignment"]
        assert set(alignment) == {"48/cattle/all", "48/cattle/beef",
                                  "48/cattle/milk", "48/hogs/all"}
        assert all(value == 0.0 for value in alignment.values())
        assert report["census_alignment_max_pct"] == 0.0

        cafo = report["cafo_match"]
        assert cafo["thresholds"] == {"cattle": 100, "chickens": 200,
                                      "hogs": 10000}
        cattle = cafo["per_livestock"]["cattle"]
        assert cattle["cafos"] == 4 and cattle["matched"] == 4
        assert cattle["match_fraction"] == 1.0
        assert 0.3 < cattle["mean_distance_miles"] < 0.8
        hogs = cafo["per_livestock"]["hogs"]
        assert hogs["eligible_farms"] == 0 and hogs["match_fraction"] == 0.0

        assert report["plant_risk"] == {"HIGH": 1, "LOW": 1, "MEDIUM": 1}

        recall = report["abundance_recall"]
        assert recall["case_groups"] == ["Duck", "Goose"]
        assert recall["ungrouped_case_species"] == ["redhead"]
        assert recall["recall_by_k"] == {"1": 0.5, "2": 1.0, "3": 1.0}

        workers = report["worker_comparison"]
        assert workers["reference_only_counties"] == ["48005"]
        assert workers["ds_only_counties"] == []
        by_county = {row["county"]: row for row in workers["rows"]}
        assert by_county["48001"]["ds_count"] == 15.0
        assert by_county["48003"]["ds_count"] == 24.0

    def test_match_distances_histogram(self, full_run):
        rows = read_rows(full_run.out / "validate" / "match_distances.csv")
        assert [r["livestock"] for r in rows] == ["cattle"]
        assert rows[0]["count"] == "4"
        assert float(rows[0]["cumulative_fraction"]) == 1.0

    def test_risk_county_artifact(self, full_run):
        rows = read_rows(full_run.out / "risk" / "county_risk.csv")
        labels = {"cattle/all", "cattle/beef", "cattle/milk", "hogs/all"}
        assert {r["subtype"] for r in rows} == labels
        assert {r["period"] for r in rows} == {"1", "2", "3", "4"}
        # 4 layers x 4 periods x 2 counties
        assert len(rows) == 32
        for row in rows:
            assert row["category"] in {"VERY_HIGH", "HIGH", "MEDIUM", "LOW"}
            assert 0.0 <= float(row["percentile"]) <= 100.0
            assert float(row["score"]) >= 0.0

    def test_risk_surface_artifact(self, full_run):
        rows = read_rows(full_run.out / "risk" / "risk_surface.csv")
        assert rows == sorted(
            rows, key=lambda r: (r["subtype"], int(r["period"]),
                                 int(r["x"]), int(r["y"])))
        assert all(float(r["score"]) >= 0.0 for r in rows)
        cells = {(r["x"], r["y"]) for r in rows if r["subtype"] == "cattle/all"}
        grid = {(str(x), "0") for x in range(6)}
        assert cells <= grid and len(cells) >= 5

    def test_risk_summary(self, full_run):
        summary = read_json(full_run.out / "risk" / "risk_summary.json")
        assert summary["periods"] == [[1, 13], [14, 26], [27, 39], [40, 52]]
        assert summary["subtypes"] == ["cattle/all", "cattle/beef",
                                       "cattle/milk", "hogs/all"]
        cattle = summary["per_subtype"]["cattle/all"]
        assert cattle["persistence_rank"] == ["48003", "48001"]
        # winter weeks dominate and period 4 has the denser tail
        assert cattle["peak_period"]["48001"] == {"no_risk": False, "period": 4}
        concordance = cattle["incidence_concordance"]
        assert sum(concordance.values()) == 6
        assert concordance["VERY_HIGH"] == 3 and concordance["LOW"] == 3
        assert concordance["UNKNOWN"] == 0

    def test_risk_map_annotated(self, full_run):
        geo = read_json(full_run.out / "risk" / "risk_map.geojson")
        assert len(geo["features"]) == 2
        for feature in geo["features"]:
            risk = feature["properties"]["risk"]
            assert set(risk) == {"cattle/all", "cattle/beef", "cattle/milk",
                                 "hogs/all"}
            for per_period in risk.values():
                assert set(per_period) == {"1", "2", "3", "4"}
                for entry in per_period.values():
                    assert set(entry) == {"category", "percentile", "score"}

    def test_rerun_in_place_is_byte_identical(self, full_run):
        before = tree_digests(full_run.out)
        assert PipelineRun(full_run.config).run_all()
        assert tree_digests(full_run.out) == before

    def test_threaded_run_matches_serial(self, full_run, tmp_path):
        config_path = generate_fixture(tmp_path)
        os.environ["DIGISIM_THREADS"] = "2"
        try:
            config = load_config(config_path)
        finally:
            del os.environ["DIGISIM_THREADS"]
        assert config.threads == 2
        assert PipelineRun(config).run_all()
        # manifests embed absolute input paths, so compare those separately
        serial = tree_digests(full_run.out, skip=("manifest.json",))
        threaded = tree_digests(config.out_dir, skip=("manifest.json",))
        assert threaded == serial
        a = read_json(full_run.out / "manifest.json")
        b = read_json(config.out_dir / "manifest.json")
        assert a["config_hash"] == b["config_hash"]
        assert {k: v["sha256"] for k, v in a["inputs"].items()} == \
               {k: v["sha256"] for k, v in b["inputs"].items()}


class TestSelectionAndFallbacks:
    def test_county_filter_limits_downstream_stages(self, tmp_path):
        config_path = generate_fixture(tmp_path)
        config = apply_overrides(load_config(config_path),
                                 counties=("48001",))
        assert PipelineRun(config).run_all()
        farms = load_farms(config.out_dir / "genfarms" / "farms.csv")
        assert {farm.county for farm in farms} == {"48001"}
        rows = read_rows(config.out_dir / "assign" / "alignment_report.csv")
        assert {r["county"] for r in rows} == {"48001"}
        # gap filling still sees every county: totals are coupled statewide
        filled = load_census(config.out_dir / "gapfill" / "census_filled.csv",
                             fixture_schemes())
        assert any(t.region == "48003" for t in filled)

    def test_missing_glw_layer_falls_back_to_central_cell(self, tmp_path):
        config_path = generate_fixture(tmp_path)
        glw = tmp_path / "glw.csv"
        kept = [line for line in glw.read_text().splitlines()
                if line.split(",")[2] != "hogs"]
        glw.write_text("\n".join(kept) + "\n")

        config = load_config(config_path)
        assert PipelineRun(config).run_all()
        rows = read_rows(config.out_dir / "assign" / "alignment_report.csv")
        hog_rows = {r["county"]: r for r in rows if r["livestock"] == "hogs"}
        geometry = fixture_geometry()
        for county, row in hog_rows.items():
            assert row["status"] == "NO_GLW_FALLBACK"
            assert row["pearson_r"] == "" and row["lambda5_rescaled"] == ""
        farms = load_farms(config.out_dir / "genfarms" / "farms.csv")
        assignment = load_assignments(config.out_dir / "assign" /
                                      "assignments.csv")
        for farm in farms:
            if farm.livestock == "hogs":
                assert assignment[farm.id] == \
                    geometry.central_cell(farm.county)

    def test_stages_require_their_prerequisites(self, tmp_path):
        config = load_config(generate_fixture(tmp_path))
        run = PipelineRun(config)
        assert not run.run("risk")
        errors = read_json(config.out_dir / "errors.json")["errors"]
        assert errors[0]["error"] == "MissingPrerequisite"
        assert errors[0]["stage"] == "risk"

        assert not PipelineRun(config).run("gapfill")
        errors = read_json(config.out_dir / "errors.json")["errors"]
        assert errors[0]["error"] == "MissingPrerequisite"


class TestIpfStage:
    """A census whose county-by-size block is genuinely underdetermined."""

    def workspace(self, root):
        scheme = SizeClassScheme(
            "cattle", (SizeClass(1, 9), SizeClass(10, None)))
        tables = [
            CountTable(level=Level.STATE, region="US", livestock="cattle",
                       subtype="all", total=CountCell(9, 106)),
            CountTable(level=Level.STATE, region="48", livestock="cattle",
                       subtype="all",
                       by_class={0: CountCell(4, 16), 1: CountCell(5, 90)},
                       total=CountCell(9, 106)),
            CountTable(level=Level.COUNTY, region="48001", livestock="cattle",
                       subtype="all",
                       by_class={0: CountCell(3, None), 1: CountCell(2, None)},
                       total=CountCell(5, 42)),
            CountTable(level=Level.COUNTY, region="48003", livestock="cattle",
                       subtype="all",
                       by_class={0: CountCell(1, None), 1: CountCell(3, None)},
                       total=CountCell(4, 64)),
        ]
        save_census(tables, root / "census.csv")
        save_size_classes({"cattle": scheme}, root / "size_classes.csv")
        geometry = GridGeometry({
            (0, 0): CellInfo(lat=35.0, lon=-101.0, county="48001"),
            (1, 0): CellInfo(lat=35.0, lon=-100.9, county="48003"),
        })
        save_geometry(geometry, root / "geometry.csv")
        save_gridded_layers(
            {"cattle": GridLayer("cattle", {(0, 0): 50.0, (1, 0): 56.0})},
            LayerKind.GLW, root / "glw.csv")
        (root / "config.yaml").write_text(
            "census: census.csv\nsize_classes: size_classes.csv\n"
            "geometry: geometry.csv\nglw: glw.csv\nout: out\n")
        return load_config(root / "config.yaml")

    def test_underdetermined_block_filled_consistently(self, tmp_path):
        config = self.workspace(tmp_path)
        run = PipelineRun(config)
        assert run.run("ingest") and run.run("gapfill")

        filled = load_census(config.out_dir / "gapfill" / "census_filled.csv",
                             {"cattle": load_scheme(tmp_path)})
        counties = {t.region: t for t in filled if t.level is Level.COUNTY}
        col_sums = {0: 0, 1: 0}
        for region, total in (("48001", 42), ("48003", 64)):
            table = counties[region]
            assert not table.has_missing()
            heads = {k: cell.heads for k, cell in table.by_class.items()}
            assert sum(heads.values()) == total  # row sums exact
            col_sums[0] += heads[0]
            col_sums[1] += heads[1]
        # column totals may carry a one-unit rounding residual
        assert abs(col_sums[0] - 16) <= 1 and abs(col_sums[1] - 90) <= 1

        rows = read_rows(config.out_dir / "gapfill" / "gapfill_report.csv")
        assert len(rows) == 1
        row = rows[0]
        assert row["group"] == "cattle/all/48"
        assert row["stage"] == "COUNTY_BY_SIZE"
        assert int(row["unknowns"]) == 4
        assert int(row["T"]) == 106
        assert row["lambda0"] == "" and row["status"] == "CONVERGED"


def load_scheme(root):
    from digisim.ingest import load_size_classes

    return load_size_classes(root / "size_classes.csv")["cattle"]


class TestConfig:
    @pytest.fixture()
    def workspace(self, tmp_path):
        config_path = generate_fixture(tmp_path)
        return tmp_path, config_path.read_text()

    def test_unknown_key_rejected(self, workspace):
        root, text = workspace
        (root / "bad.yaml").write_text(text + "flavor: spicy\n")
        with pytest.raises(ConfigError, match="unknown config keys: flavor"):
            load_config(root / "bad.yaml")

    def test_missing_required_input_rejected(self, workspace):
        root, text = workspace
        lines = [l for l in text.splitlines() if not l.startswith("census:")]
        (root / "bad.yaml").write_text("\n".join(lines) + "\n")
        with pytest.raises(ConfigError, match="missing required input"):
            load_config(root / "bad.yaml")

    def test_null_required_input_rejected(self, workspace):
        root, text = workspace
        patched = text.replace("census: census.csv", "census:")
        (root / "bad.yaml").write_text(patched)
        with pytest.raises(ConfigError, match="missing required input"):
            load_config(root / "bad.yaml")

    def test_nonexistent_input_rejected(self, workspace):
        root, text = workspace
        patched = text.replace("census: census.csv", "census: nope.csv")
        (root / "bad.yaml").write_text(patched)
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(root / "bad.yaml")

    def test_bad_gap_rejected(self, workspace):
        root, text = workspace
        (root / "bad.yaml").write_text(text + "genfarms_gap: 1.5\n")
        with pytest.raises(ConfigError, match="genfarms_gap"):
            load_config(root / "bad.yaml")

    def test_bad_periods_rejected(self, workspace):
        root, text = workspace
        (root / "bad.yaml").write_text(text + "periods: [[1, 13], [10, 52]]\n")
        with pytest.raises(ConfigError, match="bad periods"):
            load_config(root / "bad.yaml")

    def test_zero_threads_rejected(self, workspace):
        root, text = workspace
        (root / "bad.yaml").write_text(text + "threads: 0\n")
        with pytest.raises(ConfigError, match="threads"):
            load_config(root / "bad.yaml")

    def test_threads_env_override(self, workspace, monkeypatch):
        root, _ = workspace
        monkeypatch.setenv("DIGISIM_THREADS", "4")
        assert load_config(root / "config.yaml").threads == 4
        monkeypatch.setenv("DIGISIM_THREADS", "soon")
        with pytest.raises(ConfigError, match="DIGISIM_THREADS"):
            load_config(root / "config.yaml")

    def test_apply_overrides(self, workspace):
        root, _ = workspace
        config = load_config(root / "config.yaml")
        tuned = apply_overrides(config,
                                counties=("48003", "48001", "48003"),
                                out_dir=root / "elsewhere")
        assert tuned.counties == ("48001", "48003")
        assert tuned.out_dir == root / "elsewhere"
        # fingerprints ignore the output location but track the filters
        assert apply_overrides(config, out_dir=root / "x").fingerprint() == \
            config.fingerprint()
        assert tuned.fingerprint() != config.fingerprint()

    def test_run_pipeline_wrapper(self, tmp_path):
        config = load_config(generate_fixture(tmp_path))
        assert run_pipeline(config, "ingest")
        assert (config.out_dir / "canonical" / "census.csv").exists()
