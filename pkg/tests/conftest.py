import numpy as np
import pytest

from decodebench.domain import (
    ClassIndex,
    Embedding,
    ExampleSet,
    LabelVector,
    Scalar,
)


def make_example_set(n=12, n_channels=2, n_times=8, classes=None, subjects=None,
                     sessions=None, concepts=None, targets=None, labels=None,
                     sfreq=120.0, seed=0):
    """Small ExampleSet factory for split/metric tests."""
    rng = np.random.default_rng(seed)
    windows = rng.normal(size=(n, n_channels, n_times)).astype(np.float32)
    if targets is None:
        if classes is None:
            classes = [i % 2 for i in range(n)]
        targets = tuple(ClassIndex(int(c)) for c in classes)
    if subjects is None:
        subjects = tuple(f"subj_{i % 3}" for i in range(n))
    if sessions is None:
        sessions = tuple("sess_0" for _ in range(n))
    if concepts is None:
        concepts = tuple(None for _ in range(n))
    if labels is None:
        labels = tuple("" for _ in range(n))
    return ExampleSet(
        windows=windows, targets=tuple(targets), subject_ids=tuple(subjects),
        session_ids=tuple(sessions), concept_ids=tuple(concepts),
        split_labels=tuple(labels), sfreq=sfreq, window_start=0.0,
        duration=n_times / sfreq,
    )


@pytest.fixture
def es_factory():
    return make_example_set
