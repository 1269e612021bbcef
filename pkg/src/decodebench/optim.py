"""The shared downstream training recipe for the engine's linear decoder.

Losses return (scalar, gradient-wrt-inputs) pairs in float64; the optimizer is
decoupled-weight-decay Adam with bias-corrected moments; the schedule is a
linear warmup into a cosine decay; training early-stops on the first declared
validation metric and returns the best-validation parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrainerSpec
from .domain import ObjectiveKind


class TrainingError(RuntimeError):
    """Aborted training run (e.g. a non-finite loss)."""


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_cross_entropy(logits: np.ndarray, classes: np.ndarray,
                       class_weights: np.ndarray | None = None
                       ) -> tuple[float, np.ndarray]:
    """Mean weighted negative log-softmax at the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    b = logits.shape[0]
    logp = _log_softmax(logits)
    w = np.ones(b) if class_weights is None else np.asarray(class_weights,
                                                            dtype=np.float64)[classes]
    loss = float(-(w * logp[np.arange(b), classes]).sum() / b)
    probs = np.exp(logp)
    grad = probs * w[:, None]
    grad[np.arange(b), classes] -= w
    return loss, grad / b


def loss_bce_multilabel(logits: np.ndarray, labels: np.ndarray
                        ) -> tuple[float, np.ndarray]:
    """Mean (over examples and labels) binary cross-entropy on logits."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    # stable: bce = max(x,0) - x*y + log(1+exp(-|x|))
    bce = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    sig = 1.0 / (1.0 + np.exp(-logits))
    n = logits.size
    return float(bce.sum() / n), (sig - y) / n


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    n = pred.size
    return float((diff * diff).sum() / n), 2.0 * diff / n


def loss_clip(pred_embeddings: np.ndarray, target_embeddings: np.ndarray,
              tau: float = 1.0) -> tuple[float, np.ndarray]:
    """Brain-to-target contrastive loss over cosine similarities.

    Each prediction competes against every target in the batch; the gradient
    flows through the cosine normalization of the predictions only.
    """
    zh = np.asarray(pred_embeddings, dtype=np.float64)
    z = np.asarray(target_embeddings, dtype=np.float64)
    if zh.ndim != 2 or zh.shape != z.shape:
        raise ValueError(f"embedding batches must match, got {zh.shape} vs {z.shape}")
    b = zh.shape[0]
    zh_norm = np.linalg.norm(zh, axis=1, keepdims=True)
    z_norm = np.linalg.norm(z, axis=1, keepdims=True)
    if (zh_norm == 0).any() or (z_norm == 0).any():
        raise ValueError("zero-norm embedding row")
    u = zh / zh_norm
    v = z / z_norm
    sims = u @ v.T
    logp = _log_softmax(sims / tau)
    loss = float(-np.trace(logp) / b)
    g_sims = (np.exp(logp) - np.eye(b)) / (b * tau)
    a = g_sims @ v
    c = (g_sims * sims).sum(axis=1, keepdims=True)
    grad = (a - c * u) / zh_norm
    return loss, grad


def loss_and_grad(loss_name: str, outputs: np.ndarray, targets: np.ndarray,
                  class_weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    if loss_name == "CrossEntropyLoss":
        return loss_cross_entropy(outputs, targets, class_weights)
    if loss_name == "BCEWithLogitsLoss":
        return loss_bce_multilabel(outputs, targets)
    if loss_name == "MSELoss":
        return loss_mse(outputs, targets)
    if loss_name == "ClipLoss":
        return loss_clip(outputs, targets)
    raise ValueError(f"unknown loss {loss_name!r}")


# ---------------------------------------------------------------------------
# AdamW and the schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """First/second moments per parameter plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, weight_decay: float) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        # decay is decoupled and applies to the pre-update parameter
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps) + lr * weight_decay * p


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float,
                     warmup_fraction: float = 0.1) -> float:
    """Linear ramp to base_lr, then cosine decay to exactly 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = int(round(warmup_fraction * total_steps))
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Linear decoder training
# ---------------------------------------------------------------------------

@dataclass
class LinearDecoder:
    """y = x @ W.T + b over flattened windows or pooled feature vectors."""

    weight: np.ndarray  # [n_outputs, n_inputs]
    bias: np.ndarray  # [n_outputs]

    @staticmethod
    def init(n_inputs: int, n_outputs: int, seed: int) -> "LinearDecoder":
        rng = np.random.default_rng([seed, 0xDEC0DE])
        bound = 1.0 / math.sqrt(n_inputs)
        return LinearDecoder(
            weight=rng.uniform(-bound, bound, size=(n_outputs, n_inputs)),
            bias=rng.uniform(-bound, bound, size=n_outputs),
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    def copy(self) -> "LinearDecoder":
        return LinearDecoder(self.weight.copy(), self.bias.copy())


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def train_linear_decoder(x_train: np.ndarray, y_train: np.ndarray,
                         x_valid: np.ndarray, valid_scorer, higher_better: bool,
                         loss_name: str, n_outputs: int, trainer: TrainerSpec,
                         seed: int,
                         class_weights: np.ndarray | None = None
                         ) -> tuple[LinearDecoder, list[dict]]:
    """Train with the shared recipe; returns the best-validation checkpoint.

    `valid_scorer(outputs)` maps decoder outputs on `x_valid` to the monitored
    metric. Stops when the metric fails to improve for `patience` epochs (any
    strict improvement resets the counter) or at `max_epochs`. Raises
    TrainingError on a non-finite loss.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    x_valid = np.asarray(x_valid, dtype=np.float64)
    n = x_train.shape[0]
    decoder = LinearDecoder.init(x_train.shape[1], n_outputs, seed)
    params = {"weight": decoder.weight, "bias": decoder.bias}
    state = OptimizerState()
    n_batches = max(1, -(-n // trainer.batch_size))
    total_steps = trainer.max_epochs * n_batches

    best = decoder.copy()
    best_metric = -math.inf if higher_better else math.inf
    bad_epochs = 0
    history: list[dict] = []
    step = 0
    for epoch in range(1, trainer.max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        epoch_loss = 0.0
        lr = 0.0
        for bi in range(n_batches):
            idx = order[bi * trainer.batch_size:(bi + 1) * trainer.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            outputs = decoder.forward(xb)
            loss, g_out = loss_and_grad(loss_name, outputs, yb, class_weights)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch} step {step} "
                    f"(seed {seed}, loss {loss_name})"
                )
            grads = {"weight": g_out.T @ xb, "bias": g_out.sum(axis=0)}
            if trainer.grad_clip is not None:
                _clip_gradients(grads, trainer.grad_clip)
            step += 1
            lr = cosine_warmup_lr(step, total_steps, trainer.lr,
                                  trainer.warmup_fraction)
            adamw_step(params, grads, state, lr, trainer.weight_decay)
            epoch_loss += loss * len(idx)
        metric = float(valid_scorer(decoder.forward(x_valid)))
        history.append({"epoch": epoch, "train_loss": epoch_loss / n,
                        "valid_metric": metric, "lr": lr})
        improved = metric > best_metric if higher_better else metric < best_metric
        if improved:
            best_metric = metric
            best = decoder.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= max(1, trainer.patience):
                break
    return best, history


def history_to_jsonl(history: list[dict]) -> str:
    return "\n".join(json.dumps(row, sort_keys=True) for row in history)


def default_loss_for(objective: ObjectiveKind) -> str:
    from .config import LOSS_BY_OBJECTIVE

    return LOSS_BY_OBJECTIVE[objective]
