"""LLM-guided subgraph retrieval followed by GCN ranking for recommendation."""

from .errors import (BackendError, CoronaError, IngestionError, MissingArtifactError, UnknownIdError,
                     ValidationError)
from .graph import InteractionGraph, Subgraph, build_graph
from .pipeline import Dataset, RecommenderModel

__all__ = ["BackendError", "CoronaError", "Dataset", "IngestionError", "InteractionGraph", "MissingArtifactError",
           "RecommenderModel", "Subgraph", "UnknownIdError", "ValidationError", "build_graph"]
__version__ = "0.1.0"
