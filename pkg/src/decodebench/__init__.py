"""decodebench: a benchmarking engine for neural-signal decoding models."""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    ExampleSet,
    ObjectiveKind,
    Recording,
    RunRecord,
    ScoreRecord,
    hash_config,
)
