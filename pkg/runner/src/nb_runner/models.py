"""The two bundled models: a dummy echo and a torch linear decoder trained
with the shared downstream recipe (AdamW, cosine warmup schedule, early
stopping on the first declared metric)."""

from __future__ import annotations

import math

import numpy as np

from .cachefmt import CachedExampleSet

OBJECTIVES = ("binary_classification", "multiclass_classification",
              "multilabel_classification", "regression", "retrieval")


# ---------------------------------------------------------------------------
# Metrics needed for validation monitoring (higher is better for all four)
# ---------------------------------------------------------------------------

def balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    recalls = [float(np.mean(y_pred[y_true == c] == c)) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    tp = np.sum(y_true & y_pred, axis=0, dtype=float)
    fp = np.sum(~y_true & y_pred, axis=0, dtype=float)
    fn = np.sum(y_true & ~y_pred, axis=0, dtype=float)
    denom = 2 * tp + fp + fn
    return float(np.mean(np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1),
                                  0.0)))


def pearson_r(y: np.ndarray, p: np.ndarray) -> float:
    yc, pc = y - y.mean(), p - p.mean()
    denom = np.sqrt((yc * yc).sum()) * np.sqrt((pc * pc).sum())
    return float((yc * pc).sum() / denom) if denom else 0.0


def top5_accuracy(pred: np.ndarray, candidates: np.ndarray,
                  true_idx: np.ndarray) -> float:
    p = pred / np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-12)
    c = candidates / np.maximum(np.linalg.norm(candidates, axis=1, keepdims=True),
                                1e-12)
    sims = p @ c.T
    k = min(5, c.shape[0])
    hits = 0
    for i, ti in enumerate(true_idx):
        rank = 1 + int(np.sum(sims[i] > sims[i, ti]))
        rank += int(np.sum(sims[i, :ti] == sims[i, ti]))
        hits += rank <= k
    return hits / len(true_idx)


def _valid_metric(metric_name: str, objective: str, outputs: np.ndarray,
                  es: CachedExampleSet, idx: np.ndarray) -> float:
    if objective in ("binary_classification", "multiclass_classification"):
        return balanced_accuracy(es.targets[idx], outputs.argmax(axis=1))
    if objective == "multilabel_classification":
        return macro_f1(es.targets[idx], outputs >= 0.0)  # logits at 0 = prob 0.5
    if objective == "regression":
        return pearson_r(es.targets[idx].astype(float), outputs[:, 0])
    # retrieval: candidates are the distinct targets of the split
    truth = es.targets[idx]
    concepts = [es.concept_ids[i] for i in idx]
    seen: dict = {}
    for cid, vec in zip(concepts, truth):
        seen.setdefault(cid, vec)
    cand_ids = sorted(seen)
    candidates = np.stack([seen[c] for c in cand_ids]).astype(np.float64)
    true_idx = np.array([cand_ids.index(c) for c in concepts])
    return top5_accuracy(outputs, candidates, true_idx)


# ---------------------------------------------------------------------------
# Dummy echo model
# ---------------------------------------------------------------------------

class DummyModel:
    """Majority class / mean target; multilabel samples with train statistics.

    Mirrors the engine dummy exactly, including the seeded multilabel draws.
    """

    def __init__(self, objective: str, seed: int):
        self.objective = objective
        self.seed = seed
        self._fit = None

    def train(self, es: CachedExampleSet) -> dict:
        fit_idx = np.concatenate([es.indices("train"), es.indices("valid")])
        if self.objective in ("binary_classification", "multiclass_classification"):
            values = es.targets[fit_idx]
            counts = np.bincount(values, minlength=int(values.max()) + 1)
            self._fit = ("majority", int(np.argmax(counts)), len(counts))
        elif self.objective == "multilabel_classification":
            freq = es.targets[fit_idx].mean(axis=0)
            self._fit = ("freq", freq, None)
        elif self.objective == "regression":
            self._fit = ("mean", float(np.mean(es.targets[fit_idx])), None)
        else:
            self._fit = ("mean_vec", np.mean(es.targets[fit_idx], axis=0), None)
        return {}

    def predict(self, es: CachedExampleSet, idx: np.ndarray) -> list[list[float]]:
        kind, value, extra = self._fit
        n = len(idx)
        if kind == "majority":
            row = [0.0] * extra
            row[value] = 1.0
            return [list(row) for _ in range(n)]
        if kind == "freq":
            rng = np.random.default_rng([self.seed, 0xD0])
            draws = rng.random((n, len(value))) < value
            return [[float(v) for v in row] for row in draws]
        if kind == "mean":
            return [[value] for _ in range(n)]
        return [[float(v) for v in value] for _ in range(n)]


# ---------------------------------------------------------------------------
# Torch linear decoder on the shared recipe
# ---------------------------------------------------------------------------

class LinearModel:
    """Linear projection head on flattened windows, finetuned end-to-end with
    AdamW + cosine warmup and early stopping on the first declared metric."""

    def __init__(self, objective: str, n_outputs: int, loss_name: str,
                 metric_name: str, recipe: dict, seed: int):
        self.objective = objective
        self.n_outputs = n_outputs
        self.loss_name = loss_name
        self.metric_name = metric_name
        self.recipe = dict(recipe)
        self.seed = seed
        self._model = None

    def _loss(self, outputs, target):
        import torch  # deferred: dummy-mode sessions never need it
        if self.loss_name == "CrossEntropyLoss":
            return torch.nn.functional.cross_entropy(outputs, target)
        if self.loss_name == "BCEWithLogitsLoss":
            return torch.nn.functional.binary_cross_entropy_with_logits(
                outputs, target)
        if self.loss_name == "MSELoss":
            return torch.nn.functional.mse_loss(outputs, target)
        if self.loss_name == "ClipLoss":
            zh = torch.nn.functional.normalize(outputs, dim=1)
            z = torch.nn.functional.normalize(target, dim=1)
            sims = zh @ z.T
            labels = torch.arange(len(outputs))
            return torch.nn.functional.cross_entropy(sims, labels)
        raise ValueError(f"unknown loss {self.loss_name!r}")

    def _targets_tensor(self, es: CachedExampleSet, idx: np.ndarray):
        import torch

        t = es.targets[idx]
        if self.objective in ("binary_classification", "multiclass_classification"):
            return torch.as_tensor(t, dtype=torch.long)
        return torch.as_tensor(np.asarray(t, dtype=np.float32))

    def train(self, es: CachedExampleSet, progress=None) -> dict:
        import torch

        torch.manual_seed(self.seed)
        train_idx = es.indices("train")
        valid_idx = es.indices("valid")
        x = torch.as_tensor(es.windows.reshape(es.n_examples, -1))
        y_train = self._targets_tensor(es, train_idx)
        x_train, x_valid = x[train_idx], x[valid_idx]

        model = torch.nn.Linear(x.shape[1], self.n_outputs)
        lr = float(self.recipe.get("lr", 1e-4))
        wd = float(self.recipe.get("weight_decay", 0.05))
        max_epochs = int(self.recipe.get("max_epochs", 50))
        patience = int(self.recipe.get("patience", 10))
        batch_size = int(self.recipe.get("batch_size", 64))
        warmup = float(self.recipe.get("warmup_fraction", 0.1))
        grad_clip = self.recipe.get("grad_clip")
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=wd)
        n_batches = max(1, math.ceil(len(train_idx) / batch_size))
        total_steps = max_epochs * n_batches
        warmup_steps = int(round(warmup * total_steps))

        def lr_at(step: int) -> float:
            if warmup_steps > 0 and step <= warmup_steps:
                return lr * step / warmup_steps
            progress_frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
            return lr * 0.5 * (1.0 + math.cos(math.pi * progress_frac))

        best_state = {k: v.clone() for k, v in model.state_dict().items()}
        best_metric = -math.inf
        bad = 0
        step = 0
        gen = torch.Generator().manual_seed(self.seed)
        for epoch in range(1, max_epochs + 1):
            order = torch.randperm(len(train_idx), generator=gen)
            model.train()
            for b in range(n_batches):
                sel = order[b * batch_size:(b + 1) * batch_size]
                step += 1
                for group in opt.param_groups:
                    group["lr"] = lr_at(step)
                opt.zero_grad()
                loss = self._loss(model(x_train[sel]), y_train[sel])
                loss.backward()
                if grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
                opt.step()
            model.eval()
            with torch.no_grad():
                outputs = model(x_valid).double().numpy()
            metric = _valid_metric(self.metric_name, self.objective, outputs,
                                   es, valid_idx)
            if progress is not None:
                progress(epoch, metric)
            if metric > best_metric:
                best_metric = metric
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
                bad = 0
            else:
                bad += 1
                if bad >= max(1, patience):
                    break
        model.load_state_dict(best_state)
        self._model = model
        return {}

    def predict(self, es: CachedExampleSet, idx: np.ndarray) -> list[list[float]]:
        import torch

        x = torch.as_tensor(es.windows.reshape(es.n_examples, -1))[idx]
        self._model.eval()
        with torch.no_grad():
            outputs = self._model(x).double().numpy()
        return _format_outputs(outputs, self.objective)


def _format_outputs(outputs: np.ndarray, objective: str) -> list[list[float]]:
    if objective in ("binary_classification", "multiclass_classification"):
        shifted = outputs - outputs.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        return [[float(v) for v in row] for row in probs]
    if objective == "multilabel_classification":
        return [[float(v) for v in 1.0 / (1.0 + np.exp(-row))] for row in outputs]
    if objective == "regression":
        return [[float(row[0])] for row in outputs]
    return [[float(v) for v in row] for row in outputs]
