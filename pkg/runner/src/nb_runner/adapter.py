"""Adapter for wrapping third-party pretrained models as protocol runners.

The callable maps a float32 batch [B, C, T] to predictions (class
probabilities, label probabilities, scalars, or embeddings). The adapter
declares the model's preprocessing expectation and reports recipe deviations
(e.g. a model-specific learning rate or gradient clipping) back to the
engine, which records them in the run record.
"""

from __future__ import annotations

import numpy as np

from .cachefmt import CachedExampleSet
from .models import OBJECTIVES, _format_outputs
from .serve import serve


class WrappedModel:
    """No-training wrapper: predictions come straight from the callable."""

    def __init__(self, fn, objective: str, n_outputs: int):
        self.fn = fn
        self.objective = objective
        self.n_outputs = n_outputs

    def train(self, es: CachedExampleSet, progress=None) -> dict:
        return {}

    def predict(self, es: CachedExampleSet, idx: np.ndarray) -> list[list[float]]:
        outputs = np.asarray(self.fn(es.windows[idx]), dtype=np.float64)
        if outputs.ndim == 1:
            outputs = outputs[:, None]
        if outputs.shape != (len(idx), self.n_outputs):
            raise ValueError(
                f"model produced shape {outputs.shape}, expected "
                f"({len(idx)}, {self.n_outputs})"
            )
        if self.objective in ("binary_classification",
                              "multiclass_classification",
                              "multilabel_classification"):
            # callables are expected to emit probabilities already
            return [[float(v) for v in row] for row in outputs]
        return _format_outputs(outputs, self.objective)


def wrap_external_model(model_fn, objectives=None, preprocessing: str = "raw",
                        deviations: dict | None = None, pretrained_on=()):
    """Build a `serve()` entry point around `model_fn`.

    Returns a zero-argument callable that runs the protocol loop on stdio.
    """
    objectives = list(objectives or OBJECTIVES)

    def factory(offer: dict) -> WrappedModel:
        return WrappedModel(model_fn, offer["objective"],
                            int(offer.get("n_outputs") or 1))

    def run(stdin=None, stdout=None):
        serve(mode="wrapped", objectives=objectives, model_factory=factory,
              deviations=deviations, pretrained_on=pretrained_on,
              stdin=stdin, stdout=stdout)

    return run
