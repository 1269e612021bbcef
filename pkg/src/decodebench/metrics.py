"""Evaluation metrics, retrieval aggregation, and score normalization.

All accumulation is float64. The registry carries, per metric, the improvement
direction and the theoretical best value used as `s_perfect` in normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .domain import ObjectiveKind, Prediction, Target

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    """Metric applied to unusable input."""


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in the truth."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise MetricError("balanced_accuracy needs equal-length non-empty label arrays")
    recalls = []
    for c in np.unique(y_true):
        mask = y_true == c
        recalls.append(float(np.mean(y_pred[mask] == c)))
    return float(np.mean(recalls))


def macro_f1(y_true, y_pred) -> float:
    """Mean F1 over all label columns; a label with TP=FP=FN=0 scores 0."""
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.ndim != 2 or y_true.shape != y_pred.shape:
        raise MetricError("macro_f1 needs matching [n_examples, n_labels] boolean arrays")
    tp = np.sum(y_true & y_pred, axis=0, dtype=np.float64)
    fp = np.sum(~y_true & y_pred, axis=0, dtype=np.float64)
    fn = np.sum(y_true & ~y_pred, axis=0, dtype=np.float64)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(f1))


def pearson_r(y, y_hat) -> float:
    """Pearson correlation; degenerate (constant) inputs report 0 with a warning."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.size < 2:
        raise MetricError("pearson_r needs at least two samples")
    yc = y - y.mean()
    pc = y_hat - y_hat.mean()
    denom = np.sqrt(np.sum(yc * yc)) * np.sqrt(np.sum(pc * pc))
    if denom == 0:
        logger.warning("pearson_r: constant input, reporting 0 (degenerate)")
        return 0.0
    return float(np.sum(yc * pc) / denom)


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def retrieval_ranks(pred_embeddings, candidates, true_indices) -> np.ndarray:
    """Rank (1 = best) of each true candidate under cosine similarity.

    Ties are broken by candidate index (lower index ranks first).
    """
    preds = _unit_rows(np.asarray(pred_embeddings, dtype=np.float64))
    cands = _unit_rows(np.asarray(candidates, dtype=np.float64))
    if cands.shape[0] == 0:
        raise MetricError("empty candidate set")
    sims = preds @ cands.T  # [N, M]
    true_indices = np.asarray(true_indices, dtype=np.int64)
    ranks = np.empty(len(true_indices), dtype=np.int64)
    for i, ti in enumerate(true_indices):
        s = sims[i]
        better = np.count_nonzero(s > s[ti])
        tied_before = np.count_nonzero(s[:ti] == s[ti])
        ranks[i] = 1 + better + tied_before
    return ranks


def topk_accuracy(pred_embeddings, candidates, true_indices, k: int = 5
                  ) -> tuple[float, float]:
    """Top-k retrieval accuracy and median rank over the candidate set."""
    n_cands = np.asarray(candidates).shape[0]
    if k > n_cands:
        raise MetricError(f"k={k} exceeds the {n_cands} candidates")
    ranks = retrieval_ranks(pred_embeddings, candidates, true_indices)
    return float(np.mean(ranks <= k)), float(np.median(ranks))


def aggregate_repeats(pred_embeddings, subject_ids, concept_ids
                      ) -> tuple[np.ndarray, list[str]]:
    """Average repeated predictions per (subject, concept); returns one row per
    pair plus the concept of each row."""
    preds = np.asarray(pred_embeddings, dtype=np.float64)
    groups: dict[tuple[str, str], list[int]] = {}
    for i, (s, c) in enumerate(zip(subject_ids, concept_ids)):
        groups.setdefault((s, c), []).append(i)
    keys = sorted(groups)
    out = np.stack([preds[groups[key]].mean(axis=0) for key in keys])
    return out, [c for (_, c) in keys]


def normalize_score(s: float, s_dummy: float, s_perfect: float) -> float:
    """(s - s_dummy) / (s_perfect - s_dummy); 0 = dummy level, 1 = perfect."""
    denom = s_perfect - s_dummy
    if denom == 0:
        raise MetricError("normalize_score: s_perfect equals s_dummy")
    return (s - s_dummy) / denom


def normalize_max(s: float, s_dummy: float, s_best: float) -> float:
    """(s - s_dummy) / (s_best - s_dummy); the per-task best model scores 1."""
    denom = s_best - s_dummy
    if denom == 0:
        raise MetricError("normalize_max: s_best equals s_dummy")
    return (s - s_dummy) / denom


def sem_across_seeds(values) -> float:
    """Standard error of the mean: sample std (n-1 denominator) over sqrt(n)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise MetricError("sem needs at least two values")
    return float(values.std(ddof=1) / np.sqrt(values.size))


# ---------------------------------------------------------------------------
# Registry and prediction-level evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricInfo:
    name: str
    higher_better: bool
    perfect_value: float


METRIC_REGISTRY: dict[str, MetricInfo] = {
    "BalancedAcc": MetricInfo("BalancedAcc", True, 1.0),
    "MacroF1": MetricInfo("MacroF1", True, 1.0),
    "PearsonR": MetricInfo("PearsonR", True, 1.0),
    "Top5Acc": MetricInfo("Top5Acc", True, 1.0),
    "RMSE": MetricInfo("RMSE", False, 0.0),
    "MedianRank": MetricInfo("MedianRank", False, 1.0),
}


def metric_info(name: str) -> MetricInfo:
    if name not in METRIC_REGISTRY:
        raise MetricError(f"unknown metric {name!r}; known: {sorted(METRIC_REGISTRY)}")
    return METRIC_REGISTRY[name]


def predicted_classes(predictions: list[Prediction]) -> np.ndarray:
    return np.array([int(np.argmax(p.values)) for p in predictions], dtype=np.int64)


def evaluate_predictions(objective: ObjectiveKind, targets: list[Target],
                         predictions: list[Prediction], metric_names,
                         subject_ids=None, concept_ids=None) -> dict[str, float]:
    """Compute the requested metrics for one split's targets and predictions."""
    if len(targets) != len(predictions):
        raise MetricError(f"{len(predictions)} predictions for {len(targets)} targets")
    values: dict[str, float] = {}
    if objective in (ObjectiveKind.BINARY, ObjectiveKind.MULTICLASS):
        y_true = np.array([t.value for t in targets], dtype=np.int64)
        y_pred = predicted_classes(predictions)
        for name in metric_names:
            if name == "BalancedAcc":
                values[name] = balanced_accuracy(y_true, y_pred)
            else:
                raise MetricError(f"metric {name!r} unsupported for classification")
    elif objective is ObjectiveKind.MULTILABEL:
        y_true = np.array([t.values for t in targets], dtype=bool)
        y_pred = np.array([p.values >= 0.5 for p in predictions], dtype=bool)
        for name in metric_names:
            if name == "MacroF1":
                values[name] = macro_f1(y_true, y_pred)
            else:
                raise MetricError(f"metric {name!r} unsupported for multilabel")
    elif objective is ObjectiveKind.REGRESSION:
        y = np.array([t.value for t in targets], dtype=np.float64)
        y_hat = np.array([p.value for p in predictions], dtype=np.float64)
        for name in metric_names:
            if name == "PearsonR":
                values[name] = pearson_r(y, y_hat)
            elif name == "RMSE":
                values[name] = rmse(y, y_hat)
            else:
                raise MetricError(f"metric {name!r} unsupported for regression")
    elif objective is ObjectiveKind.RETRIEVAL:
        values.update(_evaluate_retrieval(targets, predictions, metric_names,
                                          subject_ids, concept_ids))
    else:
        raise MetricError(f"unhandled objective {objective}")
    return values


def _evaluate_retrieval(targets, predictions, metric_names, subject_ids, concept_ids):
    truth = np.stack([np.asarray(t.values, dtype=np.float64) for t in targets])
    preds = np.stack([np.asarray(p.values, dtype=np.float64) for p in predictions])
    if concept_ids is None or any(c is None for c in concept_ids):
        concept_ids = [f"item_{i}" for i in range(len(targets))]
    # candidate set: the distinct test-set targets, keyed by concept
    concept_vecs: dict[str, np.ndarray] = {}
    for cid, vec in zip(concept_ids, truth):
        concept_vecs.setdefault(cid, vec)
    cand_concepts = sorted(concept_vecs)
    candidates = np.stack([concept_vecs[c] for c in cand_concepts])
    cand_index = {c: i for i, c in enumerate(cand_concepts)}

    if subject_ids is not None:
        agg_preds, agg_concepts = aggregate_repeats(preds, subject_ids, concept_ids)
    else:
        agg_preds, agg_concepts = preds, list(concept_ids)
    true_idx = np.array([cand_index[c] for c in agg_concepts], dtype=np.int64)

    values = {}
    for name in metric_names:
        if name == "Top5Acc":
            k = min(5, len(cand_concepts))
            acc, _ = topk_accuracy(agg_preds, candidates, true_idx, k=k)
            values[name] = acc
        elif name == "MedianRank":
            ranks = retrieval_ranks(agg_preds, candidates, true_idx)
            values[name] = float(np.median(ranks))
        else:
            raise MetricError(f"metric {name!r} unsupported for retrieval")
    return values
