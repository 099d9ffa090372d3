"""Persistence, dataset ingestion, fold verification, benchmarking and the CLI."""
from .io import (
    Checkpoint,
    DeskDataset,
    FormatError,
    load_checkpoint,
    load_model,
    read_dataset,
    read_logits,
    save_checkpoint,
    write_dataset,
    write_logits,
)

__all__ = ["Checkpoint", "DeskDataset", "FormatError", "load_checkpoint", "load_model", "read_dataset",
           "read_logits", "save_checkpoint", "write_dataset", "write_logits"]
