"""Experiment harness: toy-domain synthesis, dataset ingestion, the
transfer-gap experiment pipeline and the CLI."""

from .domains import DomainSpec, synth_domain  # noqa: F401
from .experiment import ExperimentConfig, ExperimentReport, run_experiment  # noqa: F401
