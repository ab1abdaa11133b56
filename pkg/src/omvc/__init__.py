"""Online multi-view clustering over incomplete views.

Each view is factorized as a weighted nonnegative product ``X ~ V U^T``; the
per-view latent rows are pulled toward a shared consensus that is finally
clustered with K-means. Data are streamed in chunks, with running sufficient
statistics standing in for the chunks already seen.
"""

__version__ = "0.1.0"

from .dataset import (
    ArraySource,
    DatasetError,
    FileSource,
    MultiViewSource,
    open_dataset,
    simulate_missing,
)
from .evaluation import accuracy, kmeans, nmi, score_consensus, score_run
from .factorization import FactorState, NumericalError, SolverConfig, chunk_alternation
from .pipeline import OnlineRunner, RunReport, run_multi_pass, run_one_pass, working_set_bytes
from .synthetic import PlantedModel, PlantedSource, planted_source

__all__ = [
    "ArraySource", "DatasetError", "FileSource", "MultiViewSource", "open_dataset",
    "simulate_missing", "accuracy", "kmeans", "nmi", "score_consensus", "score_run",
    "FactorState", "NumericalError", "SolverConfig", "chunk_alternation", "OnlineRunner",
    "RunReport", "run_multi_pass", "run_one_pass", "working_set_bytes", "PlantedModel",
    "PlantedSource", "planted_source",
]
