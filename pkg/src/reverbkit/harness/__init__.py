"""Desk-scale experiment harness: synthetic parallel corpus, experiment grid, reports."""

from .corpus import ChannelSpec, CorpusParams, SynthCorpus, make_distant, synth_corpus
from .grid import ExperimentConfig, MetricsReport, run_grid
from .report import report

__all__ = [
    "ChannelSpec", "CorpusParams", "SynthCorpus", "make_distant", "synth_corpus",
    "ExperimentConfig", "MetricsReport", "run_grid", "report",
]
