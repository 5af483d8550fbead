"""Stage orchestration: configuration, artifacts, manifest, error reporting.

The pipeline turns the input tables into per-stage artifact directories
under one output root::

    out/
      canonical/   normalized copies of every configured input
      gapfill/     census_filled.csv, gapfill_report.csv
      genfarms/    farms.csv
      assign/      assignments.csv, alignment_report.csv
      validate/    validation_report.json, match_distances.csv
      risk/        risk_surface.csv, county_risk.csv, risk_summary.json,
                   risk_map.geojson (only with a boundary file)
      manifest.json, errors.json

Every file is written through a temp-file-plus-rename so interrupted runs
never leave a truncated artifact under its final name, and every byte is a
pure function of the inputs and configuration: rerunning a stage with
unchanged inputs reproduces its outputs exactly.  Structured logs go to
stderr as JSON lines; stdout stays silent so the CLI composes in shells.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import tempfile
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import cellassign, farmgen, gapfill, ingest, validation
from . import risk as riskmod
from .errors import (
    ConfigError,
    ConsistencyError,
    DigisimError,
    MissingPrerequisite,
    NoCells,
    NoConvergence,
)
from .gapfill import IpfCell, IpfMatrix, Stage
from .ingest import LayerKind
from .model import (
    ALL_SUBTYPE,
    COUNTRY_REGION,
    CountTable,
    GridGeometry,
    GridLayer,
    Level,
    PointKind,
    SizeClassScheme,
    state_of_county,
)
from .risk import weeks_for_periods
from .validation import SIZE_THRESHOLD_PRESETS

STAGES = ("ingest", "gapfill", "genfarms", "assign", "validate", "risk")

STAGE_VERSIONS = {
    "ingest": "1.0",
    "gapfill": "1.0",
    "genfarms": "1.0",
    "assign": "1.0",
    "validate": "1.0",
    "risk": "1.0",
    "all": "1.0",
}

GAPFILL_REPORT_HEADER = ["group", "stage", "unknowns", "T", "lambda0", "status"]
ALIGNMENT_REPORT_HEADER = [
    "county", "livestock", "lambda5", "lambda5_rescaled", "pearson_r", "status",
]
MATCH_DISTANCES_HEADER = [
    "livestock", "bin_lo", "bin_hi", "count", "cumulative_fraction",
]

# census fill for county-by-size matrices happens jointly per state, not
# through the per-group ILP, so it reports under its own stage label
IPF_STAGE_LABEL = "COUNTY_BY_SIZE"

_REQUIRED_INPUTS = ("census", "size_classes", "geometry", "glw")
_OPTIONAL_INPUTS = (
    "birds", "population", "points", "prevalence", "species_groups",
    "worker_counts", "boundaries",
)
_INPUT_KEYS = _REQUIRED_INPUTS + _OPTIONAL_INPUTS


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Run settings parsed from one YAML file, plus CLI overrides.

    Paths are resolved against the directory holding the config file; the
    raw file text rides along so artifact manifests can fingerprint the
    configuration independently of where it lives on disk.
    """

    census: Path
    size_classes: Path
    geometry: Path
    glw: Path
    birds: Path | None = None
    population: Path | None = None
    points: Path | None = None
    prevalence: Path | None = None
    species_groups: Path | None = None
    worker_counts: Path | None = None
    boundaries: Path | None = None
    out_dir: Path = Path("out")
    livestock: tuple[str, ...] | None = None
    subtypes: tuple[str, ...] | None = None
    counties: tuple[str, ...] | None = None
    genfarms_gap: float = 0.001
    assign_gap: float = 0.0001
    ipf_tol: float = 1e-6
    ipf_max_iter: int = 10000
    cafo_preset: str = "standard"
    cafo_thresholds: dict[str, int] | None = None
    periods: tuple[tuple[int, int], ...] = riskmod.DEFAULT_PERIOD_BOUNDS
    threads: int = 1
    drop_missing_head_classes: bool | tuple[str, ...] = False
    worker_employments: tuple[str, ...] | None = None
    fips_property: str = "fips"
    source_text: str = ""

    def __post_init__(self):
        if not 0 < self.genfarms_gap < 1:
            raise ConfigError(f"genfarms_gap {self.genfarms_gap} outside (0, 1)")
        if not 0 < self.assign_gap < 1:
            raise ConfigError(f"assign_gap {self.assign_gap} outside (0, 1)")
        if self.ipf_tol <= 0:
            raise ConfigError("ipf_tol must be positive")
        if self.ipf_max_iter < 1:
            raise ConfigError("ipf_max_iter must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.cafo_thresholds is None and \
                self.cafo_preset not in SIZE_THRESHOLD_PRESETS:
            known = ", ".join(sorted(SIZE_THRESHOLD_PRESETS))
            raise ConfigError(
                f"unknown cafo_preset {self.cafo_preset!r} (known: {known})")
        try:
            weeks_for_periods(self.periods)
        except ValueError as exc:
            raise ConfigError(f"bad periods: {exc}") from exc

    def resolved_thresholds(self) -> dict[str, int]:
        if self.cafo_thresholds is not None:
            return dict(self.cafo_thresholds)
        return dict(SIZE_THRESHOLD_PRESETS[self.cafo_preset])

    def fingerprint(self) -> str:
        """Hash of the config text and the effective selection filters.

        Deliberately excludes the output directory and resolved absolute
        paths, so the same config produces the same fingerprint wherever
        the tree is checked out.
        """
        payload = json.dumps(
            {
                "config": self.source_text,
                "counties": sorted(self.counties) if self.counties else None,
                "livestock": sorted(self.livestock) if self.livestock else None,
                "subtypes": sorted(self.subtypes) if self.subtypes else None,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


_CONFIG_SCALARS = {
    "genfarms_gap": float,
    "assign_gap": float,
    "ipf_tol": float,
    "ipf_max_iter": int,
    "cafo_preset": str,
    "threads": int,
    "fips_property": str,
}


def _string_tuple(value, key: str) -> tuple[str, ...]:
    if not isinstance(value, (list, tuple)) or \
            not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{key} must be a list of strings")
    return tuple(value)


def load_config(path) -> PipelineConfig:
    """Parse a YAML config; unknown keys are errors, inputs must exist."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    known = set(_INPUT_KEYS) | set(_CONFIG_SCALARS) | {
        "out", "livestock", "subtypes", "counties", "cafo_thresholds",
        "periods", "drop_missing_head_classes", "worker_employments",
    }
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")

    base = path.resolve().parent

    def resolve(p) -> Path:
        p = Path(str(p))
        return p if p.is_absolute() else base / p

    fields: dict = {"source_text": text}
    for key in _REQUIRED_INPUTS:
        if raw.get(key) is None:
            raise ConfigError(f"{path}: missing required input {key!r}")
    for key in _INPUT_KEYS:
        if raw.get(key) is None:
            continue
        target = resolve(raw[key])
        if not target.exists():
            raise ConfigError(f"{path}: {key} path does not exist: {target}")
        fields[key] = target
    if "out" in raw:
        fields["out_dir"] = resolve(raw["out"])
    for key, kind in _CONFIG_SCALARS.items():
        if key in raw:
            try:
                fields[key] = kind(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: bad {key}: {exc}") from exc
    for key in ("livestock", "subtypes", "counties", "worker_employments"):
        if raw.get(key) is not None:
            fields[key] = _string_tuple(raw[key], key)
    if raw.get("cafo_thresholds") is not None:
        thresholds = raw["cafo_thresholds"]
        if not isinstance(thresholds, dict) or not all(
            isinstance(k, str) and isinstance(v, int) and v >= 0
            for k, v in thresholds.items()
        ):
            raise ConfigError(
                f"{path}: cafo_thresholds must map livestock to head minimums")
        fields["cafo_thresholds"] = dict(thresholds)
    if raw.get("periods") is not None:
        periods = raw["periods"]
        try:
            fields["periods"] = tuple(
                (int(lo), int(hi)) for lo, hi in periods)
        except (TypeError, ValueError) as exc:
            raise ConfigError(
                f"{path}: periods must be [start_week, end_week] pairs") from exc
    if "drop_missing_head_classes" in raw:
        flag = raw["drop_missing_head_classes"]
        if isinstance(flag, bool):
            fields["drop_missing_head_classes"] = flag
        else:
            fields["drop_missing_head_classes"] = _string_tuple(
                flag, "drop_missing_head_classes")

    env_threads = os.environ.get("DIGISIM_THREADS")
    if env_threads:
        try:
            fields["threads"] = int(env_threads)
        except ValueError as exc:
            raise ConfigError(
                f"DIGISIM_THREADS={env_threads!r} is not an integer") from exc

    return PipelineConfig(**fields)


def apply_overrides(config: PipelineConfig, counties=None, livestock=None,
                    out_dir=None) -> PipelineConfig:
    """Fold CLI selection flags and the output override into a config."""
    updates: dict = {}
    if counties:
        updates["counties"] = tuple(sorted(set(counties)))
    if livestock:
        updates["livestock"] = tuple(sorted(set(livestock)))
    if out_dir is not None:
        updates["out_dir"] = Path(out_dir)
    return dataclasses.replace(config, **updates) if updates else config


# -- atomic artifact writing ----------------------------------------------


def _atomic(path: Path, save_fn) -> None:
    """Run ``save_fn(temp_path)`` then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".tmp-")
    os.close(fd)
    try:
        save_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _atomic_bytes(path: Path, data: bytes) -> None:
    _atomic(path, lambda tmp: Path(tmp).write_bytes(data))


def _atomic_json(path: Path, obj) -> None:
    _atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n")
                  .encode("utf-8"))


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _atomic_csv(path: Path, header, rows) -> None:
    def save(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_csv_cell(v) for v in row])

    _atomic(path, save)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def json_logger(stream=None):
    """Line-delimited JSON event logger writing to stderr by default."""
    out = stream if stream is not None else sys.stderr

    def log(event: str, **fields) -> None:
        print(json.dumps({"event": event, **fields}, sort_keys=True),
              file=out, flush=True)

    return log


# -- orchestrator ----------------------------------------------------------


class PipelineRun:
    """Executes stages against one config and owns every artifact write.

    County-level solver jobs may run on a bounded thread pool, but results
    come back to this object in job order and only it touches the output
    tree, so artifacts are deterministic for any worker count.
    """

    def __init__(self, config: PipelineConfig, log=None):
        self.config = config
        self.log = log or (lambda event, **fields: None)
        self.out = Path(config.out_dir)
        self.errors: list[dict] = []
        self.manifest = self._load_manifest()

    # - paths -

    def _canonical(self, name: str) -> Path:
        return self.out / "canonical" / name

    def _artifact(self, stage: str, name: str) -> Path:
        return self.out / stage / name

    def _need(self, *paths: Path) -> None:
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise MissingPrerequisite(
                "missing prerequisite artifacts (run the earlier stages "
                "first): " + ", ".join(missing))

    # - bookkeeping -

    def _load_manifest(self) -> dict:
        path = self.out / "manifest.json"
        fingerprint = self.config.fingerprint()
        if path.exists():
            try:
                stored = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                stored = None
            # stage records from a different configuration would be stale
            if isinstance(stored, dict) and \
                    stored.get("config_hash") == fingerprint:
                stored.setdefault("stages", {})
                stored.setdefault("inputs", {})
                stored["stage_versions"] = dict(STAGE_VERSIONS)
                return stored
        return {
            "config_hash": fingerprint,
            "stage_versions": dict(STAGE_VERSIONS),
            "inputs": {},
            "stages": {},
        }

    def _record(self, stage: str, status: str, detail: dict) -> None:
        self.manifest["stages"][stage] = {"status": status, "detail": detail}
        _atomic_json(self.out / "manifest.json", self.manifest)

    def _write_errors(self) -> None:
        _atomic_json(self.out / "errors.json", {"errors": self.errors})

    def _error(self, stage: str, exc, **context) -> None:
        entry = {
            "stage": stage,
            "error": type(exc).__name__ if isinstance(exc, BaseException)
            else "Error",
            "message": str(exc),
        }
        entry.update({k: v for k, v in context.items() if v is not None})
        self.errors.append(entry)
        self.log("error", **entry)

    # - selection filters -

    def _keep_livestock(self, livestock: str) -> bool:
        return self.config.livestock is None or \
            livestock in self.config.livestock

    def _keep_subtype(self, subtype: str) -> bool:
        return subtype == ALL_SUBTYPE or self.config.subtypes is None or \
            subtype in self.config.subtypes

    def _keep_group(self, livestock: str, subtype: str) -> bool:
        return self._keep_livestock(livestock) and self._keep_subtype(subtype)

    def _keep_county(self, fips: str) -> bool:
        return self.config.counties is None or fips in self.config.counties

    # - job pool -

    def _pool_map(self, fn, jobs: list) -> list:
        """Job results in submission order; ``fn`` must not raise."""
        if self.config.threads <= 1 or len(jobs) <= 1:
            return [fn(job) for job in jobs]
        with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
            return list(pool.map(fn, jobs))

    # - entry points -

    def run(self, stage: str) -> bool:
        """Run one stage; returns True when nothing failed."""
        if stage == "all":
            return self.run_all()
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        runner = getattr(self, f"_run_{stage}")
        self.log("stage_start", stage=stage)
        before = len(self.errors)
        try:
            detail = runner()
        except DigisimError as exc:
            self._error(stage, exc)
            detail = {}
        failed = len(self.errors) > before
        status = "failed" if failed else "complete"
        self._record(stage, status, detail)
        self._write_errors()
        self.log("stage_end", stage=stage, status=status)
        return not failed

    def run_all(self) -> bool:
        ok = True
        for stage in STAGES:
            ok = self.run(stage) and ok
        self._record("all", "complete" if ok else "failed",
                     {"stages": list(STAGES)})
        self._write_errors()
        return ok

    # - shared loading -

    def _load_canonical_geometry(self) -> GridGeometry:
        path = self._canonical("geometry.csv")
        self._need(path)
        return ingest.load_geometry(path)

    def _load_schemes(self) -> dict[str, SizeClassScheme]:
        path = self._canonical("size_classes.csv")
        self._need(path)
        return ingest.load_size_classes(path)

    def _load_assigned_farms(self, stage: str):
        """Farms joined with their cell assignments, filters applied."""
        farms_path = self._artifact("genfarms", "farms.csv")
        assign_path = self._artifact("assign", "assignments.csv")
        self._need(farms_path, assign_path)
        assignment = ingest.load_assignments(assign_path)
        assigned = []
        for farm in ingest.load_farms(farms_path):
            if not (self._keep_county(farm.county)
                    and self._keep_livestock(farm.livestock)):
                continue
            cell = assignment.get(farm.id)
            if cell is None:
                self._error(stage, ConsistencyError(
                    f"farm {farm.id} has no cell assignment"),
                    county=farm.county, livestock=farm.livestock)
                continue
            assigned.append(farm.assigned_to(cell))
        return assigned

    # - stage: ingest -

    def _run_ingest(self) -> dict:
        cfg = self.config
        inputs: dict[str, dict] = {}

        def note(key: str, path: Path) -> None:
            inputs[key] = {"path": str(path), "sha256": _sha256(path)}

        schemes = ingest.load_size_classes(cfg.size_classes)
        note("size_classes", cfg.size_classes)
        _atomic(self._canonical("size_classes.csv"),
                lambda tmp: ingest.save_size_classes(schemes, tmp))

        tables = ingest.load_census(cfg.census, schemes,
                                    cfg.drop_missing_head_classes)
        note("census", cfg.census)
        _atomic(self._canonical("census.csv"),
                lambda tmp: ingest.save_census(tables, tmp))

        geometry = ingest.load_geometry(cfg.geometry)
        note("geometry", cfg.geometry)
        _atomic(self._canonical("geometry.csv"),
                lambda tmp: ingest.save_geometry(geometry, tmp))

        for key, kind in (("glw", LayerKind.GLW), ("birds", LayerKind.BIRDS),
                          ("population", LayerKind.POPULATION)):
            path = getattr(cfg, key)
            if path is None:
                continue
            layers = ingest.load_gridded_layer(path, kind, geometry)
            note(key, path)
            _atomic(self._canonical(f"{key}.csv"),
                    lambda tmp, ls=layers, k=kind:
                    ingest.save_gridded_layers(ls, k, tmp))

        if cfg.points is not None:
            records = ingest.load_point_records(cfg.points)
            note("points", cfg.points)
            _atomic(self._canonical("points.csv"),
                    lambda tmp: ingest.save_point_records(records, tmp))

        if cfg.prevalence is not None:
            prevalence = ingest.load_prevalence(cfg.prevalence, geometry)
            note("prevalence", cfg.prevalence)
            _atomic(self._canonical("prevalence.csv"),
                    lambda tmp: ingest.save_prevalence(prevalence, tmp))

        if cfg.species_groups is not None:
            grouping = ingest.load_species_groups(cfg.species_groups)
            note("species_groups", cfg.species_groups)
            _atomic(self._canonical("species_groups.csv"),
                    lambda tmp: ingest.save_species_groups(grouping, tmp))

        if cfg.worker_counts is not None:
            counts = ingest.load_quarterly_counts(cfg.worker_counts)
            note("worker_counts", cfg.worker_counts)
            _atomic(self._canonical("worker_counts.csv"),
                    lambda tmp: ingest.save_quarterly_counts(counts, tmp))

        if cfg.boundaries is not None:
            raw = Path(cfg.boundaries).read_bytes()
            json.loads(raw.decode("utf-8"))  # reject unparseable boundary files
            note("boundaries", cfg.boundaries)
            _atomic_bytes(self._canonical("boundaries.geojson"), raw)

        self.manifest["inputs"] = inputs
        return {
            "inputs": sorted(inputs),
            "tables": len(tables),
            "cells": len(geometry.cells),
        }

    # - stage: gapfill -

    def _run_gapfill(self) -> dict:
        schemes = self._load_schemes()
        census_path = self._canonical("census.csv")
        self._need(census_path)
        tables = [t for t in ingest.load_census(census_path, schemes)
                  if self._keep_group(t.livestock, t.subtype)]

        groups: dict[tuple[str, str], list[CountTable]] = defaultdict(list)
        for table in tables:
            groups[table.group].append(table)

        ilp_report: list[gapfill.FillReportRow] = []
        filled: list[CountTable] = []
        failed_groups: set[tuple[str, str]] = set()
        for key in sorted(groups):
            gtables = groups[key]
            try:
                for stage in (Stage.STATE_TOTAL, Stage.STATE_BY_SIZE,
                              Stage.COUNTY_TOTAL):
                    gtables = gapfill.fill_stage(gtables, stage, schemes,
                                                 ilp_report)
            except DigisimError as exc:
                self._error("gapfill", exc, group="/".join(key))
                failed_groups.add(key)
            filled.extend(gtables)

        ipf_rows = self._fill_county_by_size(filled, schemes, failed_groups)

        for table in filled:
            if table.level is Level.COUNTY and table.group not in failed_groups \
                    and table.has_missing():
                self._error("gapfill", ConsistencyError(
                    f"county {table.region} {'/'.join(table.group)}: heads "
                    "still missing after every fill pass"),
                    county=table.region, group="/".join(table.group))

        _atomic(self._artifact("gapfill", "census_filled.csv"),
                lambda tmp: ingest.save_census(filled, tmp))
        report_rows = [
            (row.group, row.stage.value, row.unknowns, row.T, row.lambda0,
             row.status)
            for row in ilp_report
        ] + ipf_rows
        _atomic_csv(self._artifact("gapfill", "gapfill_report.csv"),
                    GAPFILL_REPORT_HEADER, report_rows)
        return {
            "groups": len(groups),
            "ilp_fills": len(ilp_report),
            "ipf_matrices": len(ipf_rows),
            "failed_groups": sorted("/".join(k) for k in failed_groups),
        }

    def _fill_county_by_size(self, filled: list[CountTable], schemes,
                             failed_groups) -> list[tuple]:
        """Complete county-by-size heads per state via proportional fitting.

        Returns gapfill report rows; ``filled`` is updated in place.
        """
        index: dict[tuple, int] = {}
        matrices: dict[tuple, list[int]] = defaultdict(list)
        for i, table in enumerate(filled):
            index[(table.level, table.region) + table.group] = i
            if table.level is Level.COUNTY:
                matrices[table.group + (state_of_county(table.region),)] \
                    .append(i)

        rows: list[tuple] = []
        for mkey in sorted(matrices):
            livestock, subtype, state = mkey
            if (livestock, subtype) in failed_groups:
                continue
            idxs = sorted(matrices[mkey], key=lambda i: filled[i].region)
            scheme = schemes[livestock]

            # zero-farm classes hold zero heads; settle them before seeding
            for i in idxs:
                for k in filled[i].missing_class_heads():
                    if filled[i].by_class[k].farms == 0:
                        filled[i] = filled[i].with_heads(k, 0)

            seeded = [(i, k) for i in idxs
                      for k in filled[i].missing_class_heads()]
            if not seeded:
                continue
            label = f"{livestock}/{subtype}/{state}"

            state_idx = index.get((Level.STATE, state, livestock, subtype))
            state_table = filled[state_idx] if state_idx is not None else None
            if state_table is None or state_table.has_missing():
                self._error("gapfill", ConsistencyError(
                    f"{label}: no fully known state table to anchor the "
                    "county-by-size fill"), group=label)
                continue
            if any(filled[i].total.heads is None for i in idxs):
                self._error("gapfill", ConsistencyError(
                    f"{label}: a county head total is still unknown"),
                    group=label)
                continue

            cols = tuple(range(len(scheme.classes)))
            cells = []
            for i in idxs:
                table = filled[i]
                row = []
                for k in cols:
                    cell = table.by_class.get(k)
                    if cell is None:
                        row.append(IpfCell(0.0, known=True))
                    elif cell.heads is not None:
                        row.append(IpfCell(float(cell.heads), known=True))
                    else:
                        seed = _class_average(state_table, scheme, k) \
                            * max(cell.farms or 1, 1)
                        row.append(IpfCell(seed, known=False))
                cells.append(row)
            matrix = IpfMatrix(
                rows=tuple(filled[i].region for i in idxs),
                cols=cols,
                cells=cells,
                row_totals=tuple(filled[i].total.heads for i in idxs),
                col_totals=tuple(
                    (state_table.by_class[k].heads
                     if k in state_table.by_class else 0)
                    for k in cols),
            )

            try:
                result = gapfill.ipf_fill(matrix, self.config.ipf_tol,
                                          self.config.ipf_max_iter)
                status = "CONVERGED"
            except NoConvergence as exc:
                # proceed on the best iterate: rows are exact by construction
                result = exc.best
                status = "NO_CONVERGENCE"
                self.log("ipf_no_convergence", group=label,
                         detail=str(exc))
            except DigisimError as exc:
                self._error("gapfill", exc, group=label)
                continue

            for r, i in enumerate(idxs):
                table = filled[i]
                for c, k in enumerate(cols):
                    cell = table.by_class.get(k)
                    if cell is not None and cell.heads is None:
                        table = table.with_heads(
                            k, int(result.cells[r][c].value))
                filled[i] = table
            rows.append((label, IPF_STAGE_LABEL, len(seeded),
                         sum(matrix.row_totals), None, status))
        return rows

    # - stage: genfarms -

    def _run_genfarms(self) -> dict:
        schemes = self._load_schemes()
        filled_path = self._artifact("gapfill", "census_filled.csv")
        self._need(filled_path)
        tables = ingest.load_census(filled_path, schemes)

        by_pair: dict[tuple[str, str], dict[str, CountTable]] = defaultdict(dict)
        for table in tables:
            if table.level is Level.COUNTY and self._keep_county(table.region) \
                    and self._keep_group(table.livestock, table.subtype):
                by_pair[(table.region, table.livestock)][table.subtype] = table

        jobs: list[farmgen.GenFarmsInstance] = []
        statuses: dict[str, dict] = {}
        for county, livestock in sorted(by_pair):
            try:
                jobs.append(self._genfarms_instance(
                    county, livestock, schemes[livestock],
                    by_pair[(county, livestock)],
                    gap_fraction=self.config.genfarms_gap))
            except DigisimError as exc:
                self._error("genfarms", exc, county=county,
                            livestock=livestock)
                statuses[f"{county}/{livestock}"] = {"status": "SKIPPED"}

        def solve(instance):
            try:
                return farmgen.gen_farms(instance), None
            except DigisimError as exc:
                return None, exc

        farms = []
        for instance, (solution, exc) in zip(jobs,
                                             self._pool_map(solve, jobs)):
            key = f"{instance.county}/{instance.livestock}"
            if solution is None:
                self._error("genfarms", exc, county=instance.county,
                            livestock=instance.livestock)
                statuses[key] = {"status": "INFEASIBLE"}
                continue
            farms.extend(solution.farms)
            if solution.softened:
                self.log("genfarms_softened", county=instance.county,
                         livestock=instance.livestock)
            statuses[key] = {
                "status": solution.status.value,
                "softened": solution.softened,
                "farms": len(solution.farms),
                "lambda1": float(solution.lambda1),
                "lambda2": float(solution.lambda2),
                "lambda4": float(solution.lambda4),
            }

        _atomic(self._artifact("genfarms", "farms.csv"),
                lambda tmp: ingest.save_farms(farms, tmp))
        return {"farms": len(farms), "counties": statuses}

    @staticmethod
    def _genfarms_instance(county: str, livestock: str,
                           scheme: SizeClassScheme,
                           sub_tables: dict[str, CountTable],
                           gap_fraction: float = 0.001):
        all_table = sub_tables.get(ALL_SUBTYPE)
        if all_table is None:
            raise ConsistencyError(
                f"{county}/{livestock}: no whole-type census table")

        def known_cells(table: CountTable, what: str) -> dict[int, tuple]:
            cells = {}
            for k, cell in sorted(table.by_class.items()):
                if cell.farms is None or cell.heads is None:
                    raise ConsistencyError(
                        f"{county}/{livestock}/{what}: class {k} still has "
                        "unknown counts; rerun gapfill")
                cells[k] = (cell.farms, cell.heads)
            return cells

        whole = known_cells(all_table, ALL_SUBTYPE)
        class_farms = {k: fh[0] for k, fh in whole.items()}
        class_heads = {k: fh[1] for k, fh in whole.items()}

        subtypes = tuple(sorted(s for s in sub_tables if s != ALL_SUBTYPE))
        subtype_farms: dict[tuple[str, int], int] = {}
        subtype_heads: dict[tuple[str, int], int] = {}
        if not subtypes:
            subtypes = (ALL_SUBTYPE,)
            subtype_farms = {(ALL_SUBTYPE, k): f for k, f in class_farms.items()}
            subtype_heads = {(ALL_SUBTYPE, k): h for k, h in class_heads.items()}
        else:
            for sub in subtypes:
                for k, (f, h) in known_cells(sub_tables[sub], sub).items():
                    subtype_farms[(sub, k)] = f
                    subtype_heads[(sub, k)] = h

        return farmgen.GenFarmsInstance(
            county=county, livestock=livestock, scheme=scheme,
            class_farms=class_farms, class_heads=class_heads,
            subtypes=subtypes, subtype_farms=subtype_farms,
            subtype_heads=subtype_heads,
            gap=gap_fraction * sum(class_heads.values()),
        )

    # - stage: assign -

    def _run_assign(self) -> dict:
        farms_path = self._artifact("genfarms", "farms.csv")
        self._need(farms_path)
        geometry = self._load_canonical_geometry()
        glw_path = self._canonical("glw.csv")
        self._need(glw_path)
        glw = ingest.load_gridded_layer(glw_path, LayerKind.GLW, geometry)

        pairs: dict[tuple[str, str], list] = defaultdict(list)
        for farm in ingest.load_farms(farms_path):
            if self._keep_county(farm.county) and \
                    self._keep_livestock(farm.livestock):
                pairs[(farm.county, farm.livestock)].append(farm)

        gap_fraction = self.config.assign_gap

        def place(item):
            (county, livestock), members = item
            try:
                cells = geometry.cells_in_county(county)
                if not cells:
                    raise NoCells(f"county {county} has no grid cells")
                layer = glw.get(livestock)
                capacity = {c: (layer.value(c) if layer is not None else 0.0)
                            for c in cells}
                total_heads = sum(f.total_heads for f in members)
                if math.fsum(capacity.values()) == 0.0:
                    # nothing to align against: stack on the central cell
                    central = geometry.central_cell(county)
                    assignment = {f.id: central for f in members}
                    return (assignment, (county, livestock,
                                         float(total_heads), None, None,
                                         "NO_GLW_FALLBACK"), None)
                instance = cellassign.AssignInstance(
                    county=county, livestock=livestock,
                    farms=tuple(members), cells=tuple(cells),
                    capacity=capacity, gap=gap_fraction * total_heads)
                result = cellassign.assign_farms_to_cells(instance)
                lam5, pearson = cellassign.alignment_stats(
                    instance, result.assignment)
                rescaled = cellassign.rescaled_lambda5(
                    instance, result.assignment)
                row = (county, livestock, lam5,
                       None if rescaled is None else float(rescaled),
                       pearson, result.status.value)
                return (result.assignment, row, None)
            except DigisimError as exc:
                return (None, (county, livestock), exc)

        jobs = sorted(pairs.items())
        assignment: dict[str, tuple[int, int]] = {}
        report_rows = []
        statuses: dict[str, dict] = {}
        for (placed, row, exc) in self._pool_map(place, jobs):
            county, livestock = row[0], row[1]
            key = f"{county}/{livestock}"
            if placed is None:
                self._error("assign", exc, county=county, livestock=livestock)
                statuses[key] = {"status": "FAILED"}
                continue
            assignment.update(placed)
            report_rows.append(row)
            statuses[key] = {"status": row[5], "lambda5": row[2]}
            if row[5] == "NO_GLW_FALLBACK":
                self.log("assign_fallback", county=county,
                         livestock=livestock)

        _atomic(self._artifact("assign", "assignments.csv"),
                lambda tmp: ingest.save_assignments(assignment, tmp))
        _atomic_csv(self._artifact("assign", "alignment_report.csv"),
                    ALIGNMENT_REPORT_HEADER, report_rows)
        return {"assigned": len(assignment), "counties": statuses}

    # - stage: validate -

    def _run_validate(self) -> dict:
        geometry = self._load_canonical_geometry()
        schemes = self._load_schemes()
        filled_path = self._artifact("gapfill", "census_filled.csv")
        self._need(filled_path)
        farms = self._load_assigned_farms("validate")
        tables = [t for t in ingest.load_census(filled_path, schemes)
                  if self._keep_group(t.livestock, t.subtype)]

        report: dict = {
            "notes": {
                "census_alignment": "percent differences are normalized by "
                "the mean of the two compared totals, not a mean over states",
            },
        }

        alignment = validation.census_alignment(farms, tables)
        report["census_alignment"] = {
            "/".join(key): value for key, value in sorted(alignment.items())
        }
        report["census_alignment_max_pct"] = (
            max(alignment.values()) if alignment else None)

        sections = ["census_alignment"]
        histogram_rows: list[tuple] = []

        points_path = self._canonical("points.csv")
        if points_path.exists():
            records = ingest.load_point_records(points_path)
            report["cafo_match"] = self._cafo_section(
                records, farms, geometry, histogram_rows)
            sections.append("cafo_match")

            plants = [r for r in records if r.kind is PointKind.PLANT]
            if plants:
                counts: dict[str, int] = {}
                for plant in plants:
                    level = ingest.classify_plant_risk(
                        ingest.point_product_codes(plant))
                    counts[level.value] = counts.get(level.value, 0) + 1
                report["plant_risk"] = dict(sorted(counts.items()))
                sections.append("plant_risk")

            recall = self._recall_section(records)
            if recall is not None:
                report["abundance_recall"] = recall
                sections.append("abundance_recall")

        workers = self._worker_section(geometry)
        if workers is not None:
            report["worker_comparison"] = workers
            sections.append("worker_comparison")

        _atomic_json(self._artifact("validate", "validation_report.json"),
                     report)
        _atomic_csv(self._artifact("validate", "match_distances.csv"),
                    MATCH_DISTANCES_HEADER, histogram_rows)
        return {"sections": sorted(sections)}

    def _cafo_section(self, records, farms, geometry,
                      histogram_rows: list) -> dict:
        thresholds = self.config.resolved_thresholds()
        eligible = validation.filter_farms_by_threshold(farms, thresholds)
        cafos = [r for r in records if r.kind is PointKind.CAFO
                 and self._keep_county(r.county)
                 and self._keep_livestock(r.attributes["livestock"])]

        cafo_groups: dict[tuple[str, str], list] = defaultdict(list)
        for cafo in cafos:
            cafo_groups[(cafo.county, cafo.attributes["livestock"])] \
                .append(cafo)
        farm_groups: dict[tuple[str, str], list] = defaultdict(list)
        for farm in eligible:
            farm_groups[(farm.county, farm.livestock)].append(farm)

        merged: dict[str, dict[str, list]] = defaultdict(
            lambda: {"pairs": [], "unmatched_cafos": [], "unmatched_farms": []})
        for county, livestock in sorted(set(cafo_groups) | set(farm_groups)):
            result = validation.match_cafos(
                cafo_groups.get((county, livestock), []),
                farm_groups.get((county, livestock), []), geometry)
            bucket = merged[livestock]
            bucket["pairs"].extend(result.pairs)
            bucket["unmatched_cafos"].extend(result.unmatched_cafos)
            bucket["unmatched_farms"].extend(result.unmatched_farms)

        per_livestock: dict[str, dict] = {}
        for livestock in sorted(merged):
            bucket = merged[livestock]
            result = validation.MatchResult(
                pairs=bucket["pairs"],
                unmatched_cafos=sorted(bucket["unmatched_cafos"]),
                unmatched_farms=sorted(bucket["unmatched_farms"]))
            n_cafos = len(result.pairs) + len(result.unmatched_cafos)
            stats = {
                "cafos": n_cafos,
                "eligible_farms": len(result.pairs)
                + len(result.unmatched_farms),
                "matched": len(result.pairs),
                "match_fraction": (len(result.pairs) / n_cafos
                                   if n_cafos else None),
            }
            if result.pairs:
                stats["mean_distance_miles"] = (
                    math.fsum(result.distances) / len(result.pairs))
                stats["p90_distance_miles"] = \
                    validation.matched_distance_percentile(result, 90)
                for lo, hi, count, cum in \
                        validation.distance_histogram(result):
                    histogram_rows.append((livestock, lo, hi, count, cum))
            per_livestock[livestock] = stats
        return {
            "thresholds": dict(sorted(thresholds.items())),
            "preset": (self.config.cafo_preset
                       if self.config.cafo_thresholds is None else "custom"),
            "per_livestock": per_livestock,
        }

    def _recall_section(self, records) -> dict | None:
        birds_path = self._canonical("birds.csv")
        groups_path = self._canonical("species_groups.csv")
        incidence = [r for r in records if r.kind is PointKind.INCIDENCE]
        if not (birds_path.exists() and groups_path.exists() and incidence):
            return None
        geometry = self._load_canonical_geometry()
        layers = ingest.load_gridded_layer(birds_path, LayerKind.BIRDS,
                                           geometry)
        grouping = ingest.load_species_groups(groups_path)

        totals: dict[str, float] = defaultdict(float)
        for (species, _week), layer in layers.items():
            totals[species] += layer.total()
        # annual mean over the full 52-week cycle; absent weeks count as zero
        mean_abundance = {s: v / 52.0 for s, v in sorted(totals.items())}

        case_groups = set()
        ungrouped = set()
        for record in incidence:
            species = record.attributes["species"]
            if species in grouping:
                case_groups.add(grouping[species])
            else:
                ungrouped.add(species)

        n_groups = len(set(grouping.values()))
        recall_by_k = {
            str(k): validation.topk_recall(mean_abundance, case_groups,
                                           grouping, k)
            for k in range(1, max(n_groups, 1) + 1)
        }
        return {
            "groups": n_groups,
            "case_groups": sorted(case_groups),
            "ungrouped_case_species": sorted(ungrouped),
            "recall_by_k": recall_by_k,
        }

    def _worker_section(self, geometry) -> dict | None:
        population_path = self._canonical("population.csv")
        counts_path = self._canonical("worker_counts.csv")
        if not (population_path.exists() and counts_path.exists()):
            return None
        layers = ingest.load_gridded_layer(
            population_path, LayerKind.POPULATION, geometry)
        wanted = self.config.worker_employments
        selected = [layer for (_demo, employment), layer in
                    sorted(layers.items())
                    if wanted is None or employment in wanted]
        reference = ingest.load_quarterly_counts(counts_path)
        result = validation.worker_comparison(selected, geometry, reference)
        return {
            "rows": [
                {
                    "county": row.county,
                    "ds_count": row.ds_count,
                    "reference_mean": row.reference_mean,
                    "difference": row.difference,
                    "cv": row.cv,
                }
                for row in result.rows
            ],
            "ds_only_counties": list(result.ds_only_counties),
            "reference_only_counties": list(result.reference_only_counties),
        }

    # - stage: risk -

    def _run_risk(self) -> dict:
        geometry = self._load_canonical_geometry()
        birds_path = self._canonical("birds.csv")
        prevalence_path = self._canonical("prevalence.csv")
        self._need(birds_path, prevalence_path)
        farms = self._load_assigned_farms("risk")

        bird_layers = ingest.load_gridded_layer(birds_path, LayerKind.BIRDS,
                                                geometry)
        weekly: dict[int, dict] = {}
        for (_species, week), layer in sorted(bird_layers.items()):
            acc = weekly.setdefault(week, {})
            for cell, value in layer.values.items():
                acc[cell] = acc.get(cell, 0.0) + value
        abundance = {week: GridLayer(("abundance", week), values)
                     for week, values in weekly.items()}
        prevalence = ingest.load_prevalence(prevalence_path, geometry)

        densities: dict[tuple[str, str], dict] = defaultdict(dict)
        for farm in farms:
            for subtype, heads in farm.heads_by_subtype.items():
                if not self._keep_subtype(subtype):
                    continue
                cells = densities[(farm.livestock, subtype)]
                cells[farm.cell] = cells.get(farm.cell, 0.0) + heads

        period_weeks = weeks_for_periods(self.config.periods)
        periods = sorted(period_weeks)

        surfaces: dict[tuple[str, int], riskmod.RiskSurface] = {}
        by_livestock: dict[str, list[GridLayer]] = defaultdict(list)
        for (livestock, subtype) in sorted(densities):
            label = f"{livestock}/{subtype}"
            layer = GridLayer(label, densities[(livestock, subtype)])
            by_livestock[livestock].append(layer)
            for period in periods:
                try:
                    surfaces[(label, period)] = riskmod.compute_risk_surface(
                        layer, abundance, prevalence, label, period, geometry,
                        period_weeks)
                except DigisimError as exc:
                    self._error("risk", exc, livestock=livestock)
                    break

        # whole-type scenario when a livestock splits into several subtypes
        for livestock in sorted(by_livestock):
            layers = by_livestock[livestock]
            if len(layers) < 2:
                continue
            label = f"{livestock}/{ALL_SUBTYPE}"
            for period in periods:
                try:
                    surfaces[(label, period)] = riskmod.scenario_surface(
                        layers, abundance, prevalence, period, geometry,
                        period_weeks, label=label)
                except DigisimError as exc:
                    self._error("risk", exc, livestock=livestock)
                    break

        surface_rows = []
        county_rows = []
        county_detail: dict[str, dict[int, dict[str, dict]]] = \
            defaultdict(lambda: defaultdict(dict))
        for (label, period) in sorted(surfaces):
            surface = surfaces[(label, period)]
            for cell in sorted(surface.cell_scores):
                surface_rows.append((cell[0], cell[1], label, period,
                                     surface.cell_scores[cell]))
            ranks = riskmod.percentile_ranks(surface.county_scores)
            categories = riskmod.categorize(surface)
            for county in sorted(surface.county_scores):
                score = surface.county_scores[county]
                county_rows.append((county, label, period, score,
                                    ranks[county], categories[county].value))
                county_detail[label][period][county] = {
                    "score": score,
                    "percentile": ranks[county],
                    "category": categories[county].value,
                }

        incidence = []
        points_path = self._canonical("points.csv")
        if points_path.exists():
            incidence = ingest.load_point_records(points_path,
                                                  PointKind.INCIDENCE)

        summary: dict = {
            "periods": [list(bounds) for bounds in self.config.periods],
            "subtypes": sorted({label for (label, _p) in surfaces}),
            "per_subtype": {},
        }
        for label in summary["subtypes"]:
            have = [p for p in periods if (label, p) in surfaces]
            categories_by_period = {
                p: riskmod.categorize(surfaces[(label, p)]) for p in have}
            scores_by_period = {
                p: surfaces[(label, p)].county_scores for p in have}
            entry: dict = {
                "persistence_rank":
                    riskmod.persistence_rank(categories_by_period),
                "peak_period": {
                    county: {"period": peak.period, "no_risk": peak.no_risk}
                    for county, peak in
                    sorted(riskmod.peak_period(scores_by_period).items())
                },
            }
            if incidence:
                entry["incidence_concordance"] = riskmod.incidence_concordance(
                    categories_by_period, incidence, period_weeks)
            summary["per_subtype"][label] = entry

        _atomic_csv(self._artifact("risk", "risk_surface.csv"),
                    ["x", "y", "subtype", "period", "score"], surface_rows)
        _atomic_csv(self._artifact("risk", "county_risk.csv"),
                    ["fips", "subtype", "period", "score", "percentile",
                     "category"], county_rows)
        _atomic_json(self._artifact("risk", "risk_summary.json"), summary)

        boundaries_path = self._canonical("boundaries.geojson")
        if boundaries_path.exists():
            self._write_risk_map(boundaries_path, county_detail)

        return {
            "surfaces": len(surfaces),
            "subtypes": summary["subtypes"],
            "periods": len(periods),
        }

    def _write_risk_map(self, boundaries_path: Path, county_detail) -> None:
        """Attach county risk attributes to user-supplied boundary polygons."""
        data = json.loads(boundaries_path.read_text(encoding="utf-8"))
        prop = self.config.fips_property
        for feature in data.get("features", []):
            properties = feature.setdefault("properties", {})
            fips = properties.get(prop)
            if fips is None:
                continue
            risk_prop: dict = {}
            for label, per_period in sorted(county_detail.items()):
                periods = {str(p): detail[str(fips)]
                           for p, detail in sorted(per_period.items())
                           if str(fips) in detail}
                if periods:
                    risk_prop[label] = periods
            if risk_prop:
                properties["risk"] = risk_prop
        _atomic_json(self._artifact("risk", "risk_map.geojson"), data)


def _class_average(state_table: CountTable, scheme: SizeClassScheme,
                   index: int) -> float:
    """Mean heads per farm in a state size class; window midpoint fallback."""
    cell = state_table.by_class.get(index)
    if cell is not None and cell.farms and cell.heads is not None:
        return cell.heads / cell.farms
    window = scheme.classes[index]
    if window.w_max is None:
        return float(window.w_min)
    return (window.w_min + window.w_max) / 2.0


def run_pipeline(config: PipelineConfig, stage: str = "all",
                 log=None) -> bool:
    """Convenience wrapper: build a run and execute one stage (or all)."""
    return PipelineRun(config, log=log).run(stage)
