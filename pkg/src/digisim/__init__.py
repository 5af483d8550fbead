"""Synthesize, validate, and risk-map farm-level livestock datasets.

The package fuses census-style count tables with gridded abundance layers
into a farm-level synthetic dataset, checks it against independent ground
truth, and maps spatiotemporal wild-bird spillover risk.  Stages are
importable here or runnable through the ``digisim`` command.
"""

from .errors import DigisimError
from .fixture import generate_fixture
from .pipeline import (
    PipelineConfig,
    PipelineRun,
    apply_overrides,
    load_config,
    run_pipeline,
)

__version__ = "1.0.0"

__all__ = [
    "DigisimError",
    "PipelineConfig",
    "PipelineRun",
    "apply_overrides",
    "generate_fixture",
    "load_config",
    "run_pipeline",
    "__version__",
]
