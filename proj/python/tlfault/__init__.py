"""Transmission-line fault simulation, features and transfer-learned CNNs."""

from ._core import (
    SUPPORTED_LENGTHS,
    ArchiveError,
    Dataset,
    Network,
    SolverError,
    StageError,
    TrainingError,
    ValidationError,
    Waveforms,
    evaluate,
    extract_features,
    kmeans,
    latency,
    load_dataset,
    load_waveforms,
    run,
    simulate,
    train,
    transfer,
)

__all__ = [
    "SUPPORTED_LENGTHS",
    "ArchiveError",
    "Dataset",
    "Network",
    "SolverError",
    "StageError",
    "TrainingError",
    "ValidationError",
    "Waveforms",
    "evaluate",
    "extract_features",
    "kmeans",
    "latency",
    "load_dataset",
    "load_waveforms",
    "run",
    "simulate",
    "train",
    "transfer",
]
