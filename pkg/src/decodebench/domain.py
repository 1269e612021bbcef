"""Core data types shared by every module of the benchmark engine.

Signal arrays are float32; metric, loss and optimizer accumulation is float64.
All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

SIGNAL_DTYPE = np.float32
ACCUM_DTYPE = np.float64

TRAIN = "train"
VALID = "valid"
TEST = "test"
SPLIT_LABELS = (TRAIN, VALID, TEST)


class ObjectiveKind(enum.Enum):
    BINARY = "binary_classification"
    MULTICLASS = "multiclass_classification"
    MULTILABEL = "multilabel_classification"
    REGRESSION = "regression"
    RETRIEVAL = "retrieval"


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Event:
    """One trigger in a recording, at `onset` seconds from recording start."""

    onset: float
    event_type: str
    description: str = ""
    concept_id: str | None = None


@dataclass(frozen=True)
class Recording:
    """Continuous multichannel signal plus its event list and identity."""

    recording_id: str
    subject_id: str
    session_id: str
    sfreq: float
    channels: tuple[str, ...]
    data: np.ndarray  # [n_channels, n_samples], float32, read-only
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=SIGNAL_DTYPE)
        if data.ndim != 2:
            raise ValueError(f"recording data must be 2-D, got shape {data.shape}")
        if data.shape[0] != len(self.channels):
            raise ValueError(
                f"data has {data.shape[0]} rows but {len(self.channels)} channel names"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel names must be unique")
        if not self.sfreq > 0:
            raise ValueError(f"sfreq must be positive, got {self.sfreq}")
        if not np.isfinite(data).all():
            raise ValueError("recording contains non-finite samples")
        duration = data.shape[1] / self.sfreq
        for ev in self.events:
            if not 0.0 <= ev.onset <= duration:
                raise ValueError(
                    f"event onset {ev.onset} outside recording [0, {duration:.3f}]"
                )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "events", tuple(self.events))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sfreq

    def with_data(self, data: np.ndarray, sfreq: float | None = None) -> "Recording":
        return replace(self, data=data, sfreq=self.sfreq if sfreq is None else sfreq)


# ---------------------------------------------------------------------------
# Targets and predictions (tagged unions)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassIndex:
    value: int


@dataclass(frozen=True)
class LabelVector:
    values: tuple[bool, ...]


@dataclass(frozen=True)
class Scalar:
    value: float


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray  # float32 vector, read-only

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=SIGNAL_DTYPE).reshape(-1)
        if not np.isfinite(arr).all():
            raise ValueError("embedding contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __eq__(self, other):
        return isinstance(other, Embedding) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


Target = ClassIndex | LabelVector | Scalar | Embedding


def target_to_json(t: Target) -> dict:
    if isinstance(t, ClassIndex):
        return {"kind": "class", "value": int(t.value)}
    if isinstance(t, LabelVector):
        return {"kind": "labels", "values": [bool(v) for v in t.values]}
    if isinstance(t, Scalar):
        return {"kind": "scalar", "value": float(t.value)}
    if isinstance(t, Embedding):
        return {"kind": "embedding", "values": [float(v) for v in t.values]}
    raise TypeError(f"not a Target: {t!r}")


def target_from_json(obj: dict) -> Target:
    kind = obj["kind"]
    if kind == "class":
        return ClassIndex(int(obj["value"]))
    if kind == "labels":
        return LabelVector(tuple(bool(v) for v in obj["values"]))
    if kind == "scalar":
        return Scalar(float(obj["value"]))
    if kind == "embedding":
        return Embedding(np.asarray(obj["values"], dtype=SIGNAL_DTYPE))
    raise ValueError(f"unknown target kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ClassProbs:
    """Class probability vector; sums to 1 within 1e-6."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=ACCUM_DTYPE).reshape(-1)
        if not np.isfinite(arr).all():
            raise ValueError("probabilities contain non-finite values")
        if abs(float(arr.sum()) - 1.0) > 1e-6:
            raise ValueError(f"class probabilities sum to {arr.sum()}, expected 1")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class LabelProbs:
    """Per-label probabilities, each in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=ACCUM_DTYPE).reshape(-1)
        if not np.isfinite(arr).all():
            raise ValueError("probabilities contain non-finite values")
        if (arr < -1e-12).any() or (arr > 1 + 1e-12).any():
            raise ValueError("label probabilities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", np.clip(arr, 0.0, 1.0))


@dataclass(frozen=True)
class ScalarPred:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("scalar prediction must be finite")


@dataclass(frozen=True, eq=False)
class EmbeddingPred:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=ACCUM_DTYPE).reshape(-1)
        if not np.isfinite(arr).all():
            raise ValueError("embedding prediction contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


Prediction = ClassProbs | LabelProbs | ScalarPred | EmbeddingPred


# ---------------------------------------------------------------------------
# Example sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExampleSet:
    """Epoched windows with per-example targets, tags and split labels.

    `split_labels` entries are "train"/"valid"/"test", or "" before a split
    strategy has run. `window_start` is in seconds relative to the trigger.
    """

    windows: np.ndarray  # [n_examples, n_channels, n_times] float32
    targets: tuple[Target, ...]
    subject_ids: tuple[str, ...]
    session_ids: tuple[str, ...]
    concept_ids: tuple[str | None, ...]
    split_labels: tuple[str, ...]
    sfreq: float
    window_start: float
    duration: float

    def __post_init__(self):
        win = np.asarray(self.windows, dtype=SIGNAL_DTYPE)
        if win.ndim != 3:
            raise ValueError(f"windows must be 3-D, got shape {win.shape}")
        n = win.shape[0]
        for name in ("targets", "subject_ids", "session_ids", "concept_ids", "split_labels"):
            seq = tuple(getattr(self, name))
            if len(seq) != n:
                raise ValueError(f"{name} has length {len(seq)}, expected {n}")
            object.__setattr__(self, name, seq)
        win.setflags(write=False)
        object.__setattr__(self, "windows", win)

    @property
    def n_examples(self) -> int:
        return self.windows.shape[0]

    @property
    def n_channels(self) -> int:
        return self.windows.shape[1]

    @property
    def n_times(self) -> int:
        return self.windows.shape[2]

    def with_split_labels(self, labels) -> "ExampleSet":
        return replace(self, split_labels=tuple(labels))

    def with_windows(self, windows: np.ndarray) -> "ExampleSet":
        return replace(self, windows=windows)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.split_labels) == split)

    def equals(self, other: "ExampleSet") -> bool:
        return (
            np.array_equal(self.windows, other.windows)
            and self.targets == other.targets
            and self.subject_ids == other.subject_ids
            and self.session_ids == other.session_ids
            and self.concept_ids == other.concept_ids
            and self.split_labels == other.split_labels
            and self.sfreq == other.sfreq
            and self.window_start == other.window_start
            and self.duration == other.duration
        )


def validate_example_set(es: ExampleSet) -> list[str]:
    """Check every ExampleSet invariant; returns violation descriptions.

    Reports, never raises: an empty list means the set is well formed.
    """
    violations: list[str] = []
    if not np.isfinite(es.windows).all():
        bad = int(np.count_nonzero(~np.isfinite(es.windows)))
        violations.append(f"windows contain {bad} non-finite samples")
    for i, label in enumerate(es.split_labels):
        if label not in SPLIT_LABELS:
            if label == "":
                violations.append(f"example {i} lacks a split label")
            else:
                violations.append(f"example {i} has unknown split label {label!r}")
    kinds = {type(t) for t in es.targets}
    if len(kinds) > 1:
        violations.append(f"mixed target kinds: {sorted(k.__name__ for k in kinds)}")
    dims = set()
    for t in es.targets:
        if isinstance(t, LabelVector):
            dims.add(len(t.values))
        elif isinstance(t, Embedding):
            dims.add(len(t.values))
    if len(dims) > 1:
        violations.append(f"inconsistent target dimensions: {sorted(dims)}")
    if not es.sfreq > 0:
        violations.append(f"sfreq must be positive, got {es.sfreq}")
    if not es.duration > 0:
        violations.append(f"duration must be positive, got {es.duration}")
    return violations


# ---------------------------------------------------------------------------
# Scores and run records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreRecord:
    """One metric outcome plus its normalization anchors (dummy and perfect)."""

    metric_name: str
    value: float
    dummy_value: float
    perfect_value: float
    normalized: float
    max_normalized: float | None = None
    seed: int = 0
    n_test: int = 0

    def to_json(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "value": self.value,
            "dummy_value": self.dummy_value,
            "perfect_value": self.perfect_value,
            "normalized": self.normalized,
            "max_normalized": self.max_normalized,
            "seed": self.seed,
            "n_test": self.n_test,
        }

    @staticmethod
    def from_json(obj: dict) -> "ScoreRecord":
        return ScoreRecord(**obj)


@dataclass(frozen=True)
class RunRecord:
    """One (model, task, dataset, seed) execution."""

    model_id: str
    task_id: str
    dataset_id: str
    seed: int
    config_hash: int
    scores: tuple[ScoreRecord, ...] = ()
    pretrain_overlap: bool = False
    wall_time: float = 0.0
    started_at: str = ""
    finished_at: str = ""
    split_hash: int = 0
    status: str = "ok"
    error: str | None = None
    deviations: dict | None = None

    @property
    def key(self) -> tuple:
        return (self.model_id, self.task_id, self.dataset_id, self.seed, self.config_hash)

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "task_id": self.task_id,
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "scores": [s.to_json() for s in self.scores],
            "pretrain_overlap": self.pretrain_overlap,
            "wall_time": self.wall_time,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "split_hash": self.split_hash,
            "status": self.status,
            "error": self.error,
            "deviations": self.deviations,
        }

    @staticmethod
    def from_json(obj: dict) -> "RunRecord":
        obj = dict(obj)
        obj["scores"] = tuple(ScoreRecord.from_json(s) for s in obj.get("scores", []))
        return RunRecord(**obj)


# ---------------------------------------------------------------------------
# Config hashing
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    """Canonical key-sorted compact JSON (the hashing pre-image)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def hash_config(resolved_config: str) -> int:
    """64-bit stable hash of canonical config text (BLAKE2b, 8-byte digest)."""
    digest = hashlib.blake2b(resolved_config.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
