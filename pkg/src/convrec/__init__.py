"""Conversational recommendation over knowledge-graph paths.

A reasoning agent walks the KG to produce recommendation paths, a
pointer-generator decoder turns those paths into responses, and the two
sides are trained jointly with reward signals flowing both ways.
"""

__version__ = "0.1.0"

from convrec.kg import KnowledgeGraph, EmbeddingTable, ReasonPath, load_kg
from convrec.corpus import Dialog, Turn, TrainingExample, load_corpus
from convrec.trainer import TrainConfig

__all__ = [
    "KnowledgeGraph",
    "EmbeddingTable",
    "ReasonPath",
    "load_kg",
    "Dialog",
    "Turn",
    "TrainingExample",
    "load_corpus",
    "TrainConfig",
]
