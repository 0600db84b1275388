"""Configuration, file formats and experiment recipes behind the ``bonlaw`` CLI."""

from .config import ConfigError, ExperimentConfig, resolve
from .io import IngestError, ingest_scores_csv, scores_csv
from .runner import RunManifest, run_experiment, verify_manifest

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "IngestError",
    "RunManifest",
    "ingest_scores_csv",
    "resolve",
    "run_experiment",
    "scores_csv",
    "verify_manifest",
]
