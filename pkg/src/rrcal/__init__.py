"""Calibration toolkit for retriever-reader machine reading pipelines.

Ingests per-query score dumps (retriever scores, reader logits, correctness
labels), fits calibrators in three scopes (reader-only, individual, joint via
a differentiable softened top-k retrieval), and evaluates calibration (ECE,
reliability diagrams) and selective prediction (risk-coverage, AURC). A
synthetic pipeline simulator with exact ground-truth probabilities backs the
test suite.
"""

from .core import (
    AnswerCandidate,
    CalibrationExample,
    Dataset,
    DocumentCandidate,
    InterestCandidate,
    ParseError,
    Prediction,
    RngState,
    Split,
    build_interest_set,
    load_dataset,
    save_dataset,
)

__all__ = [
    "AnswerCandidate",
    "CalibrationExample",
    "Dataset",
    "DocumentCandidate",
    "InterestCandidate",
    "ParseError",
    "Prediction",
    "RngState",
    "Split",
    "build_interest_set",
    "load_dataset",
    "save_dataset",
]

__version__ = "0.1.0"
