"""AIM synthetic-data training over homomorphically encrypted tabular data."""

from .aim import RunConfig, build_workload, run, run_plaintext_aim
from .encoding import Dataset, DatasetSchema, load_dataset
from .he import HeParams, keygen
from .workflow import audit_transcript, run_workflow

__all__ = [
    "Dataset",
    "DatasetSchema",
    "HeParams",
    "RunConfig",
    "audit_transcript",
    "build_workload",
    "keygen",
    "load_dataset",
    "run",
    "run_plaintext_aim",
    "run_workflow",
]

__version__ = "0.1.0"
