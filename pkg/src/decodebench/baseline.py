"""Reference models: dummy and chance floors plus the handcrafted SPD pipelines.

The handcrafted pipelines mirror the four feature-based baselines (xDAWN
tangent-space logistic regression, covariance tangent-space logistic/ridge,
and log co-spectra logistic regression) and are fit once on the concatenation
of the training and validation sets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import spd
from .config import TaskSpec
from .domain import (
    ClassProbs,
    EmbeddingPred,
    ExampleSet,
    LabelProbs,
    ObjectiveKind,
    Prediction,
    ScalarPred,
    Target,
)
from .optim import LinearDecoder, _log_softmax

logger = logging.getLogger(__name__)

C_GRID = tuple(10.0 ** e for e in (-2.0, -1.0, 0.0, 1.0, 2.0))
ALPHA_GRID = tuple(10.0 ** e for e in (-3.0, -1.5, 0.0, 1.5, 3.0))


class BaselineError(RuntimeError):
    """Baseline asked to do something unsupported."""


# ---------------------------------------------------------------------------
# Dummy and chance floors
# ---------------------------------------------------------------------------

def dummy_fit_predict(fit_targets: list[Target], objective: ObjectiveKind,
                      n_test: int, seed: int = 0) -> list[Prediction]:
    """Constant majority-class / mean-target predictor; multilabel samples
    per-label with the training-set frequencies (seeded)."""
    if not fit_targets:
        raise BaselineError("dummy predictor needs a non-empty fit set")
    if objective in (ObjectiveKind.BINARY, ObjectiveKind.MULTICLASS):
        values = [t.value for t in fit_targets]
        n_classes = max(values) + 1
        counts = np.bincount(values, minlength=n_classes)
        majority = int(np.argmax(counts))  # ties resolve to the smallest index
        probs = np.zeros(n_classes)
        probs[majority] = 1.0
        return [ClassProbs(probs) for _ in range(n_test)]
    if objective is ObjectiveKind.REGRESSION:
        mean = float(np.mean([t.value for t in fit_targets]))
        return [ScalarPred(mean) for _ in range(n_test)]
    if objective is ObjectiveKind.RETRIEVAL:
        mean = np.mean([t.values for t in fit_targets], axis=0)
        return [EmbeddingPred(mean) for _ in range(n_test)]
    if objective is ObjectiveKind.MULTILABEL:
        freq = np.mean([t.values for t in fit_targets], axis=0)
        rng = np.random.default_rng([seed, 0xD0])
        draws = rng.random((n_test, len(freq))) < freq
        return [LabelProbs(row.astype(np.float64)) for row in draws]
    raise BaselineError(f"unhandled objective {objective}")


def chance_predict(x_test: np.ndarray, objective: ObjectiveKind, n_outputs: int,
                   seed: int = 0) -> list[Prediction]:
    """Predictions of an untrained, randomly initialized linear decoder."""
    x = np.asarray(x_test, dtype=np.float64)
    decoder = LinearDecoder.init(x.shape[1], n_outputs, seed)
    outputs = decoder.forward(x)
    return outputs_to_predictions(outputs, objective)


def outputs_to_predictions(outputs: np.ndarray, objective: ObjectiveKind
                           ) -> list[Prediction]:
    if objective in (ObjectiveKind.BINARY, ObjectiveKind.MULTICLASS):
        probs = np.exp(_log_softmax(outputs))
        return [ClassProbs(row) for row in probs]
    if objective is ObjectiveKind.MULTILABEL:
        return [LabelProbs(1.0 / (1.0 + np.exp(-row))) for row in outputs]
    if objective is ObjectiveKind.REGRESSION:
        return [ScalarPred(float(row[0])) for row in np.atleast_2d(outputs)]
    if objective is ObjectiveKind.RETRIEVAL:
        return [EmbeddingPred(row) for row in outputs]
    raise BaselineError(f"unhandled objective {objective}")


# ---------------------------------------------------------------------------
# Heads: standard scaling, L2 logistic regression, ridge (both CV-tuned)
# ---------------------------------------------------------------------------

@dataclass
class StandardScaler:
    mean: np.ndarray
    scale: np.ndarray

    @staticmethod
    def fit(x: np.ndarray) -> "StandardScaler":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        return StandardScaler(mean, np.where(std > 0, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


def _softmax_objective(w_flat, x, y, n_classes, c_reg):
    n, f = x.shape
    w = w_flat.reshape(n_classes, f + 1)
    logits = x @ w[:, :-1].T + w[:, -1]
    logp = _log_softmax(logits)
    nll = -logp[np.arange(n), y].mean()
    reg = float((w[:, :-1] ** 2).sum()) / (2.0 * c_reg * n)
    probs = np.exp(logp)
    probs[np.arange(n), y] -= 1.0
    g_logits = probs / n
    g_w = np.concatenate([g_logits.T @ x, g_logits.sum(axis=0)[:, None]], axis=1)
    g_w[:, :-1] += w[:, :-1] / (c_reg * n)
    return nll + reg, g_w.ravel()


@dataclass
class LogisticModel:
    weights: np.ndarray  # [n_classes, n_features + 1], bias last
    scaler: StandardScaler
    c_reg: float

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        xs = self.scaler.transform(x)
        logits = xs @ self.weights[:, :-1].T + self.weights[:, -1]
        return np.exp(_log_softmax(logits))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)


def _fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, c_reg: float,
                  w0: np.ndarray | None = None, loose: bool = False) -> np.ndarray:
    """Minimize mean NLL + ||W||^2/(2 C n) to a tiny gradient (L-BFGS).

    `loose` fits are for CV model selection only; the returned production fit
    always runs at the tight tolerance (gradient norm well below 1e-6).
    """
    f = x.shape[1]
    if w0 is None:
        w0 = np.zeros(n_classes * (f + 1))
    options = ({"maxiter": 200, "gtol": 1e-6, "ftol": 1e-12} if loose
               else {"maxiter": 5000, "gtol": 1e-9, "ftol": 1e-16})
    res = optimize.minimize(
        _softmax_objective, w0.ravel(), args=(x, y, n_classes, c_reg),
        method="L-BFGS-B", jac=True, options=options,
    )
    return res.x.reshape(n_classes, f + 1)


def _stratified_folds(y: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Fold index per example; classes spread round-robin over folds."""
    rng = np.random.default_rng([seed, 0xF0])
    folds = np.zeros(len(y), dtype=np.int64)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


def _plain_folds(n: int, n_folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xF1])
    return rng.permutation(n) % n_folds


def logistic_fit_cv(features: np.ndarray, labels: np.ndarray,
                    c_grid=C_GRID, n_folds: int = 5, seed: int = 0) -> LogisticModel:
    """L2 logistic regression with C chosen by stratified 5-fold CV, refit on
    all folds; features are standard-scaled inside each fit."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not np.isfinite(x).all():
        raise BaselineError("non-finite features")
    classes = np.unique(y)
    if len(classes) < 2:
        raise BaselineError("logistic regression needs >= 2 classes")
    n_classes = int(classes.max()) + 1
    folds = _stratified_folds(y, min(n_folds, np.bincount(y).min()), seed)
    n_actual = folds.max() + 1
    cv_scores = {c_reg: [] for c_reg in c_grid}
    for k in range(n_actual):
        tr, va = folds != k, folds == k
        if len(np.unique(y[tr])) < 2 or va.sum() == 0:
            continue
        scaler = StandardScaler.fit(x[tr])
        xs_tr = scaler.transform(x[tr])
        w = None  # warm-start along the C path within a fold
        for c_reg in c_grid:
            w = _fit_logistic(xs_tr, y[tr], n_classes, c_reg, w0=w, loose=True)
            model = LogisticModel(w, scaler, c_reg)
            pred = model.predict(x[va])
            recalls = [np.mean(pred[y[va] == cc] == cc) for cc in np.unique(y[va])]
            cv_scores[c_reg].append(float(np.mean(recalls)))
    best_c, best_score = None, -np.inf
    for c_reg in c_grid:
        mean_score = float(np.mean(cv_scores[c_reg])) if cv_scores[c_reg] else -np.inf
        if mean_score > best_score:
            best_score, best_c = mean_score, c_reg
    scaler = StandardScaler.fit(x)
    xs = scaler.transform(x)
    w = _fit_logistic(xs, y, n_classes, best_c, loose=True)
    w = _fit_logistic(xs, y, n_classes, best_c, w0=w)
    return LogisticModel(w, scaler, best_c)


@dataclass
class RidgeModel:
    weights: np.ndarray  # [n_features, n_targets]
    intercept: np.ndarray  # [n_targets]
    scaler: StandardScaler
    alpha: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.scaler.transform(x) @ self.weights + self.intercept


def _fit_ridge(x: np.ndarray, y: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Ridge via augmented least squares (bias unpenalized, via centering)."""
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc = x - x_mean
    yc = y - y_mean
    f = x.shape[1]
    aug_x = np.vstack([xc, np.sqrt(alpha) * np.eye(f)])
    aug_y = np.vstack([yc, np.zeros((f, y.shape[1]))])
    w, *_ = np.linalg.lstsq(aug_x, aug_y, rcond=None)
    return w, y_mean - x_mean @ w


def ridge_fit_cv(features: np.ndarray, targets: np.ndarray,
                 alpha_grid=ALPHA_GRID, n_folds: int = 5, seed: int = 0) -> RidgeModel:
    """Multi-output ridge with alpha chosen by 5-fold CV on MSE, refit on all."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise BaselineError("non-finite features or targets")
    if x.shape[0] < 2:
        raise BaselineError("ridge needs >= 2 samples")
    folds = _plain_folds(x.shape[0], min(n_folds, x.shape[0]), seed)
    best_alpha, best_mse = None, np.inf
    for alpha in alpha_grid:
        errs = []
        for k in range(folds.max() + 1):
            tr, va = folds != k, folds == k
            if tr.sum() < 2 or va.sum() == 0:
                continue
            scaler = StandardScaler.fit(x[tr])
            w, b = _fit_ridge(scaler.transform(x[tr]), y[tr], alpha)
            pred = scaler.transform(x[va]) @ w + b
            errs.append(float(((pred - y[va]) ** 2).mean()))
        mse = float(np.mean(errs)) if errs else np.inf
        if mse < best_mse:
            best_mse, best_alpha = mse, alpha
    scaler = StandardScaler.fit(x)
    w, b = _fit_ridge(scaler.transform(x), y, best_alpha)
    return RidgeModel(w, b, scaler, best_alpha)


# ---------------------------------------------------------------------------
# Pipeline routing (one pipeline per task type)
# ---------------------------------------------------------------------------

XDAWN_CATEGORIES = ("evoked", "p300", "erp")


def pipeline_for(task: TaskSpec) -> str:
    if task.objective in (ObjectiveKind.BINARY, ObjectiveKind.MULTICLASS):
        if task.category in XDAWN_CATEGORIES:
            return "XdawnTsLR"
        if task.category == "ssvep":
            return "CoSpectraLogLR"
        return "CovTsLR"
    if task.objective is ObjectiveKind.MULTILABEL:
        return "CovTsLR"
    if task.objective in (ObjectiveKind.REGRESSION, ObjectiveKind.RETRIEVAL):
        return "CovTsRidge"
    raise BaselineError(f"no handcrafted route for objective {task.objective}")


def _cov_tangent_features(windows_fit, windows_test):
    covs_fit = np.stack([spd.shrink(spd.covariance(w), samples=w) for w in windows_fit])
    covs_test = np.stack([spd.shrink(spd.covariance(w), samples=w) for w in windows_test])
    ref = spd.riemannian_mean(covs_fit)
    return spd.tangent_features(covs_fit, ref), spd.tangent_features(covs_test, ref)


def run_handcrafted(task: TaskSpec, es: ExampleSet, seed: int = 0) -> list[Prediction]:
    """Fit the routed pipeline on train+valid and predict the test split."""
    fit_idx = np.concatenate([es.indices("train"), es.indices("valid")])
    test_idx = es.indices("test")
    if fit_idx.size == 0 or test_idx.size == 0:
        raise BaselineError("handcrafted pipeline needs non-empty fit and test splits")
    windows = es.windows.astype(np.float64)
    pipeline = pipeline_for(task)
    logger.info("task %s routed to %s", task.task_id, pipeline)

    if pipeline == "XdawnTsLR":
        y = np.array([es.targets[i].value for i in range(es.n_examples)], dtype=np.int64)
        filters, prototypes = spd.xdawn_filters(windows[fit_idx], y[fit_idx],
                                                n_filters=min(4, es.n_channels))
        covs_fit = spd.xdawn_augmented_covariances(windows[fit_idx], filters, prototypes)
        covs_test = spd.xdawn_augmented_covariances(windows[test_idx], filters, prototypes)
        ref = spd.riemannian_mean(covs_fit)
        f_fit = spd.tangent_features(covs_fit, ref)
        f_test = spd.tangent_features(covs_test, ref)
        model = logistic_fit_cv(f_fit, y[fit_idx], seed=seed)
        return [ClassProbs(row) for row in model.predict_proba(f_test)]

    if pipeline == "CoSpectraLogLR":
        y = np.array([es.targets[i].value for i in range(es.n_examples)], dtype=np.int64)
        band = (2.0, min(40.0, 0.99 * es.sfreq / 2.0))
        f_fit = spd.cospectra_features(windows[fit_idx], es.sfreq, band)
        f_test = spd.cospectra_features(windows[test_idx], es.sfreq, band)
        model = logistic_fit_cv(f_fit, y[fit_idx], seed=seed)
        return [ClassProbs(row) for row in model.predict_proba(f_test)]

    if pipeline == "CovTsLR":
        f_fit, f_test = _cov_tangent_features(windows[fit_idx], windows[test_idx])
        if task.objective is ObjectiveKind.MULTILABEL:
            y = np.array([es.targets[i].values for i in range(es.n_examples)], dtype=np.int64)
            probs = np.zeros((len(test_idx), y.shape[1]))
            for label in range(y.shape[1]):
                col = y[fit_idx, label]
                if len(np.unique(col)) < 2:  # constant label: predict its frequency
                    probs[:, label] = float(col.mean())
                    continue
                model = logistic_fit_cv(f_fit, col, seed=seed)
                probs[:, label] = model.predict_proba(f_test)[:, 1]
            return [LabelProbs(row) for row in probs]
        y = np.array([es.targets[i].value for i in range(es.n_examples)], dtype=np.int64)
        model = logistic_fit_cv(f_fit, y[fit_idx], seed=seed)
        return [ClassProbs(row) for row in model.predict_proba(f_test)]

    if pipeline == "CovTsRidge":
        f_fit, f_test = _cov_tangent_features(windows[fit_idx], windows[test_idx])
        if task.objective is ObjectiveKind.REGRESSION:
            y = np.array([es.targets[i].value for i in fit_idx], dtype=np.float64)
            model = ridge_fit_cv(f_fit, y, seed=seed)
            return [ScalarPred(float(v)) for v in model.predict(f_test)[:, 0]]
        y = np.stack([np.asarray(es.targets[i].values, dtype=np.float64) for i in fit_idx])
        model = ridge_fit_cv(f_fit, y, seed=seed)
        return [EmbeddingPred(row) for row in model.predict(f_test)]

    raise BaselineError(f"unknown pipeline {pipeline!r}")
