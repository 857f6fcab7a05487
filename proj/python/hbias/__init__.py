"""Python bindings for the hbias homogeneity bias audit."""

import json as _json
from pathlib import Path as _Path

from ._core import (
    ConfigError,
    DependencyMissing,
    cosine,
    fit_lmm,
    pair_count,
    run_pipeline,
    sha256_hex,
    wald_p,
)

__all__ = [
    "ConfigError",
    "DependencyMissing",
    "cosine",
    "fit_lmm",
    "load_results",
    "pair_count",
    "run_pipeline",
    "sha256_hex",
    "wald_p",
]


def load_results(out_dir="out"):
    """Parsed results.json from a pipeline output directory."""
    return _json.loads((_Path(out_dir) / "results.json").read_text())
