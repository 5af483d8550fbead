"""Command-line entry point: one subcommand per pipeline stage.

Structured JSON log lines go to stderr; artifacts go to the configured
output directory; stdout stays empty so the command composes in shells.
Exit status is 0 only when every processed county succeeded.
"""

from __future__ import annotations

from pathlib import Path

import click

from . import __version__
from .errors import DigisimError
from .fixture import generate_fixture
from .pipeline import (
    STAGES,
    PipelineRun,
    apply_overrides,
    json_logger,
    load_config,
)

_STAGE_SUMMARIES = {
    "ingest": "Validate inputs and write canonical copies.",
    "gapfill": "Impute redacted census head counts.",
    "genfarms": "Synthesize farms matching county size-class targets.",
    "assign": "Place farms on grid cells against the livestock layer.",
    "validate": "Compare the synthesized dataset with ground truth.",
    "risk": "Compute spillover-risk surfaces and county rankings.",
    "all": "Run every stage in order.",
}


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="digisim")
def main() -> None:
    """Synthesize, validate, and risk-map farm-level livestock datasets."""


def _stage_options(fn):
    fn = click.option(
        "--config", "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        default=None, help="Run configuration (YAML).")(fn)
    fn = click.option(
        "--county", "counties", multiple=True, metavar="FIPS",
        help="Restrict processing to this county (repeatable).")(fn)
    fn = click.option(
        "--livestock", multiple=True, metavar="ID",
        help="Restrict processing to this livestock type (repeatable).")(fn)
    fn = click.option(
        "--out", type=click.Path(file_okay=False, path_type=Path),
        default=None, help="Override the configured output directory.")(fn)
    fn = click.option(
        "--fixture", is_flag=False, flag_value="fixture", default=None,
        type=click.Path(file_okay=False, path_type=Path), metavar="[DIR]",
        help="Generate the bundled two-county synthetic dataset into DIR "
             "(default ./fixture) and run against it instead of --config.")(fn)
    return fn


def _run_stage(stage, config_path, counties, livestock, out, fixture):
    log = json_logger()
    try:
        if fixture is not None:
            config_path = generate_fixture(Path(fixture))
            log("fixture_generated", directory=str(fixture),
                config=str(config_path))
        elif config_path is None:
            raise click.UsageError("either --config or --fixture is required")
        config = apply_overrides(load_config(config_path),
                                 counties=counties, livestock=livestock,
                                 out_dir=out)
        ok = PipelineRun(config, log=log).run(stage)
    except DigisimError as exc:
        log("fatal", error=type(exc).__name__, message=str(exc))
        raise SystemExit(1) from exc
    raise SystemExit(0 if ok else 1)


def _make_command(stage: str):
    @_stage_options
    def command(config_path, counties, livestock, out, fixture):
        _run_stage(stage, config_path, counties, livestock, out, fixture)

    command.__name__ = stage
    command.__doc__ = _STAGE_SUMMARIES[stage]
    return main.command(name=stage)(command)


for _stage in STAGES + ("all",):
    _make_command(_stage)


if __name__ == "__main__":
    main()
