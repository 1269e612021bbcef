"""Experiment orchestration: the model zoo, planning, execution, and caching.

An experiment is one (model, task, dataset, seed) cell. Planning is
deterministic and dedups against the store by config hash; execution isolates
failures into failed RunRecords and never aborts the batch.
"""

from __future__ import annotations

import concurrent.futures
import datetime
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baseline as baseline_mod
from . import data as data_mod
from . import dsp, metrics, split as split_mod
from .config import TaskSpec, builtin_task_registry
from .domain import (
    ExampleSet,
    ObjectiveKind,
    Prediction,
    RunRecord,
    ScoreRecord,
    validate_example_set,
)
from .optim import train_linear_decoder
from .protocol import RunnerProcess, RunnerSession, build_task_offer
from .store import ResultsStore

logger = logging.getLogger(__name__)

INTERNAL_MODELS = ("dummy", "chance", "handcrafted", "linear", "cov_linear")


class BenchError(RuntimeError):
    pass


def nb_root() -> Path:
    return Path(os.environ.get("NB_ROOT", "nb_root"))


@dataclass(frozen=True)
class Experiment:
    model_id: str
    task_id: str
    dataset_id: str
    seed: int
    config_hash: int


@dataclass(frozen=True)
class RunnerModel:
    """External model reachable over protocol v1."""

    model_id: str
    command: tuple[str, ...]
    pretrained_on: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# Dataset materialization and caching
# ---------------------------------------------------------------------------

class BenchContext:
    """Caches materialized example sets, manifests and dummy references."""

    def __init__(self, root: Path | None = None, runners: dict[str, RunnerModel] | None = None):
        self.root = Path(root) if root is not None else nb_root()
        self.runners = dict(runners or {})
        self._sets: dict[tuple, tuple[ExampleSet, int]] = {}
        self._dummy_refs: dict[tuple, dict[str, float]] = {}
        self._lock = threading.Lock()

    def cache_paths(self, task: TaskSpec, dataset_id: str) -> tuple[Path, Path]:
        tag = f"{task.task_id}-{task.config_hash():016x}"
        base = self.root / "cache" / dataset_id
        return base / f"{tag}.nbch", base / f"{tag}.manifest.json"

    def prepare(self, task: TaskSpec, dataset_id: str) -> tuple[Path, Path]:
        """Build (or reuse) the on-disk cache + split manifest for a dataset."""
        cache_path, manifest_path = self.cache_paths(task, dataset_id)
        if not (cache_path.exists() and manifest_path.exists()):
            es, _ = self.example_set(task, dataset_id)
            data_mod.write_cache(es, cache_path)
            manifest = split_mod.split_manifest(es, task.task_id, dataset_id,
                                                task.split.seed)
            split_mod.write_manifest(manifest, manifest_path)
        return cache_path, manifest_path

    def example_set(self, task: TaskSpec, dataset_id: str) -> tuple[ExampleSet, int]:
        """Materialized, preprocessed, epoched and split example set + split hash."""
        key = (task.task_id, dataset_id, task.config_hash())
        with self._lock:
            if key in self._sets:
                return self._sets[key]
        cache_path, manifest_path = self.cache_paths(task, dataset_id)
        if cache_path.exists():
            es = data_mod.read_cache(cache_path)
        else:
            es = _materialize(task, dataset_id)
        manifest = split_mod.split_manifest(es, task.task_id, dataset_id,
                                            task.split.seed)
        split_hash = split_mod.manifest_hash(manifest)
        problems = validate_example_set(es)
        if problems:
            raise BenchError(f"{task.task_id}/{dataset_id}: invalid example set: "
                             f"{problems}")
        with self._lock:
            self._sets[key] = (es, split_hash)
        return es, split_hash

    def dummy_reference(self, task: TaskSpec, dataset_id: str) -> dict[str, float]:
        """Per-metric dummy values: mean over the trainer seeds of the dummy
        baseline on the identical test split."""
        key = (task.task_id, dataset_id, task.config_hash())
        with self._lock:
            if key in self._dummy_refs:
                return self._dummy_refs[key]
        es, _ = self.example_set(task, dataset_id)
        fit_targets, test_targets, test_subjects, test_concepts = _split_views(es)
        per_metric: dict[str, list[float]] = {m: [] for m in task.metric_names}
        for seed in task.trainer.seeds:
            preds = baseline_mod.dummy_fit_predict(fit_targets, task.objective,
                                                   len(test_targets), seed=seed)
            values = metrics.evaluate_predictions(
                task.objective, test_targets, preds, task.metric_names,
                subject_ids=test_subjects, concept_ids=test_concepts)
            for m, v in values.items():
                per_metric[m].append(v)
        refs = {m: float(np.mean(v)) for m, v in per_metric.items()}
        with self._lock:
            self._dummy_refs[key] = refs
        return refs


def _materialize(task: TaskSpec, dataset_id: str) -> ExampleSet:
    source = task.source_for(dataset_id)
    if source.is_synthetic:
        profile = data_mod.get_profile(source.dataset_id)
        recordings = data_mod.generate_synthetic(profile)
        aux = data_mod.synthetic_concept_embeddings(profile)
    else:
        root = Path(source.root or nb_root() / "data") / dataset_id
        header_files = sorted(root.glob("*.json"))
        recordings = [data_mod.load_recording(root, p.stem) for p in header_files
                      if not p.name.endswith(".manifest.json")]
        aux = _load_embedding_table(root)
        if not recordings:
            raise BenchError(f"no recordings under {root}")
    recordings = [dsp.preprocess(rec) for rec in recordings]
    es = data_mod.epoch_all(recordings, task, aux_embeddings=aux)
    if task.baseline is not None:
        es = dsp.baseline_correct(es, task.baseline)
    return split_mod.apply_split(es, task.split)


def _load_embedding_table(root: Path) -> dict | None:
    import json

    path = root / "embeddings.json"
    if not path.exists():
        return None
    table = json.loads(path.read_text(encoding="utf-8"))
    return {k: np.asarray(v, dtype=np.float32) for k, v in table.items()}


def _split_views(es: ExampleSet):
    fit_idx = np.concatenate([es.indices("train"), es.indices("valid")])
    test_idx = es.indices("test")
    fit_targets = [es.targets[i] for i in fit_idx]
    test_targets = [es.targets[i] for i in test_idx]
    test_subjects = [es.subject_ids[i] for i in test_idx]
    test_concepts = [es.concept_ids[i] for i in test_idx]
    return fit_targets, test_targets, test_subjects, test_concepts


# ---------------------------------------------------------------------------
# Feature builders and validation scorers for trained internal models
# ---------------------------------------------------------------------------

def _flat_features(es: ExampleSet) -> np.ndarray:
    return es.windows.reshape(es.n_examples, -1).astype(np.float64)


def _cov_features(es: ExampleSet) -> np.ndarray:
    from . import spd

    windows = es.windows.astype(np.float64)
    train_idx = es.indices("train")
    covs = np.stack([spd.shrink(spd.covariance(w), samples=w) for w in windows])
    ref = spd.riemannian_mean(covs[train_idx])
    return spd.tangent_features(covs, ref)


def _target_arrays(es: ExampleSet, objective: ObjectiveKind) -> np.ndarray:
    if objective in (ObjectiveKind.BINARY, ObjectiveKind.MULTICLASS):
        return np.array([t.value for t in es.targets], dtype=np.int64)
    if objective is ObjectiveKind.MULTILABEL:
        return np.array([t.values for t in es.targets], dtype=np.float64)
    if objective is ObjectiveKind.REGRESSION:
        return np.array([[t.value] for t in es.targets], dtype=np.float64)
    if objective is ObjectiveKind.RETRIEVAL:
        return np.stack([np.asarray(t.values, dtype=np.float64) for t in es.targets])
    raise BenchError(f"unhandled objective {objective}")


def _valid_scorer(task: TaskSpec, es: ExampleSet, valid_idx: np.ndarray):
    """Score decoder outputs on the valid split with the first declared metric."""
    metric = task.metric_names[0]
    objective = task.objective
    targets = [es.targets[i] for i in valid_idx]
    subjects = [es.subject_ids[i] for i in valid_idx]
    concepts = [es.concept_ids[i] for i in valid_idx]

    def scorer(outputs: np.ndarray) -> float:
        preds = baseline_mod.outputs_to_predictions(outputs, objective)
        values = metrics.evaluate_predictions(objective, targets, preds, (metric,),
                                              subject_ids=subjects,
                                              concept_ids=concepts)
        return values[metric]

    return scorer, metrics.metric_info(metric).higher_better


def _run_trained_linear(task: TaskSpec, es: ExampleSet, seed: int,
                        features: np.ndarray) -> list[Prediction]:
    train_idx = es.indices("train")
    valid_idx = es.indices("valid")
    test_idx = es.indices("test")
    y = _target_arrays(es, task.objective)
    scorer, higher_better = _valid_scorer(task, es, valid_idx)
    n_outputs = task.n_outputs or (int(y.max()) + 1)
    decoder, _ = train_linear_decoder(
        features[train_idx], y[train_idx], features[valid_idx], scorer,
        higher_better, task.loss_name, n_outputs, task.trainer, seed,
    )
    outputs = decoder.forward(features[test_idx])
    return baseline_mod.outputs_to_predictions(outputs, task.objective)


# ---------------------------------------------------------------------------
# Experiment execution
# ---------------------------------------------------------------------------

def run_experiment(ctx: BenchContext, task: TaskSpec, experiment: Experiment
                   ) -> RunRecord:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.monotonic()
    model_id = experiment.model_id
    es, split_hash = ctx.example_set(task, experiment.dataset_id)
    test_idx = es.indices("test")
    fit_targets, test_targets, test_subjects, test_concepts = _split_views(es)
    deviations: dict = {}
    pretrain_overlap = False

    if model_id == "dummy":
        preds = baseline_mod.dummy_fit_predict(fit_targets, task.objective,
                                               len(test_idx), seed=experiment.seed)
    elif model_id == "chance":
        preds = baseline_mod.chance_predict(_flat_features(es)[test_idx],
                                            task.objective,
                                            task.n_outputs or 1,
                                            seed=experiment.seed)
    elif model_id == "handcrafted":
        preds = baseline_mod.run_handcrafted(task, es, seed=experiment.seed)
    elif model_id == "linear":
        preds = _run_trained_linear(task, es, experiment.seed, _flat_features(es))
    elif model_id == "cov_linear":
        preds = _run_trained_linear(task, es, experiment.seed, _cov_features(es))
    elif model_id in ctx.runners:
        preds, deviations, pretrain_overlap = _run_external(
            ctx, task, experiment, len(test_idx))
    else:
        raise BenchError(f"unknown model {model_id!r}")

    values = metrics.evaluate_predictions(
        task.objective, test_targets, preds, task.metric_names,
        subject_ids=test_subjects, concept_ids=test_concepts)
    dummy_refs = ctx.dummy_reference(task, experiment.dataset_id)
    scores = []
    for name in task.metric_names:
        info = metrics.metric_info(name)
        s_dummy = dummy_refs[name]
        s_perfect = info.perfect_value
        value = values[name]
        normalized = (metrics.normalize_score(value, s_dummy, s_perfect)
                      if s_perfect != s_dummy else 0.0)
        scores.append(ScoreRecord(
            metric_name=name, value=float(value), dummy_value=s_dummy,
            perfect_value=s_perfect, normalized=float(normalized),
            seed=experiment.seed, n_test=len(test_idx)))
    finished = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return RunRecord(
        model_id=model_id, task_id=task.task_id, dataset_id=experiment.dataset_id,
        seed=experiment.seed, config_hash=experiment.config_hash,
        scores=tuple(scores), pretrain_overlap=pretrain_overlap,
        wall_time=time.monotonic() - t0, started_at=started, finished_at=finished,
        split_hash=split_hash, status="ok",
        deviations=deviations or None)


def _run_external(ctx: BenchContext, task: TaskSpec, experiment: Experiment,
                  n_test: int):
    runner = ctx.runners[experiment.model_id]
    cache_path, manifest_path = ctx.prepare(task, experiment.dataset_id)
    es, split_hash = ctx.example_set(task, experiment.dataset_id)
    process = RunnerProcess(list(runner.command))
    process.start()
    try:
        session = RunnerSession(process)
        caps = session.handshake()
        overlap = experiment.dataset_id in set(
            caps.get("pretrained_on", ())) | set(runner.pretrained_on)
        offer = build_task_offer(task, experiment.dataset_id, experiment.seed)
        manifest_payload = {
            "cache_path": str(cache_path),
            "split_manifest_path": str(manifest_path),
            "split_hash": split_hash,
            "n_channels": es.n_channels,
            "n_times": es.n_times,
            "sfreq": es.sfreq,
        }
        accepted, reason = session.offer_task(offer, manifest_payload)
        if not accepted:
            raise BenchError(f"runner declined: {reason}")
        deviations = session.request_training(timeout=600.0)
        preds, more = session.collect_predictions("test", task.objective, n_test,
                                                  timeout=600.0)
        deviations.update(more)
        return preds, deviations, overlap
    finally:
        process.close()


# ---------------------------------------------------------------------------
# Planning and batch runs
# ---------------------------------------------------------------------------

def resolve_tasks(task_ids=None) -> list[TaskSpec]:
    registry = {t.task_id: t for t in builtin_task_registry()}
    if task_ids is None:
        return list(registry.values())
    out = []
    for tid in task_ids:
        if tid not in registry:
            raise BenchError(f"unknown task {tid!r}; valid ids: {sorted(registry)}")
        out.append(registry[tid])
    return out


def plan(variant: str, model_ids, tasks=None, seeds=None,
         store: ResultsStore | None = None, force: bool = False,
         runners: dict[str, RunnerModel] | None = None) -> list[Experiment]:
    """Deterministic experiment grid, minus config-hash-matching completed cells.

    `tasks` may be task ids or resolved TaskSpec objects (overrides applied).
    """
    if variant not in ("core", "full"):
        raise BenchError(f"variant must be core or full, got {variant!r}")
    if tasks and not isinstance(tasks[0], str):
        tasks = list(tasks)
    else:
        tasks = resolve_tasks(tasks)
    known = set(INTERNAL_MODELS) | set(runners or {})
    for m in model_ids:
        if m not in known:
            raise BenchError(f"unknown model {m!r}; valid ids: {sorted(known)}")
    done = store.keys() if (store is not None and not force) else set()
    experiments = []
    for task in tasks:
        datasets = task.dataset_ids if variant == "full" else task.dataset_ids[:1]
        cfg_hash = task.config_hash()
        for dataset_id in datasets:
            for model_id in sorted(model_ids):
                for seed in (seeds if seeds is not None else task.trainer.seeds):
                    key = (model_id, task.task_id, dataset_id, seed, cfg_hash)
                    if key in done:
                        continue
                    experiments.append(Experiment(model_id, task.task_id,
                                                  dataset_id, seed, cfg_hash))
    experiments.sort(key=lambda e: (e.task_id, e.dataset_id, e.model_id, e.seed))
    return experiments


def run(experiments: list[Experiment], ctx: BenchContext, store: ResultsStore,
        workers: int | None = None, tasks=None) -> list[RunRecord]:
    """Execute a plan; failures become failed RunRecords, never batch aborts.

    `tasks` carries the resolved specs the plan was built from; defaults to
    the builtin registry.
    """
    task_list = tasks if tasks is not None else builtin_task_registry()
    tasks = {t.task_id: t for t in task_list}
    results: list[RunRecord] = []

    def _one(exp: Experiment) -> RunRecord:
        task = tasks[exp.task_id]
        try:
            return run_experiment(ctx, task, exp)
        except Exception as exc:  # noqa: BLE001 - isolation contract
            logger.exception("experiment %s failed", exp)
            return RunRecord(
                model_id=exp.model_id, task_id=exp.task_id,
                dataset_id=exp.dataset_id, seed=exp.seed,
                config_hash=exp.config_hash, status="failed", error=str(exc))

    n_workers = workers if workers is not None else (os.cpu_count() or 1)
    if n_workers <= 1 or len(experiments) <= 1:
        for exp in experiments:
            results.append(_one(exp))
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_one, experiments))
    for record in results:  # single writer, plan order
        store.append(record)
    return results
