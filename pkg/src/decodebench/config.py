"""Task and trainer configuration: YAML parsing, validation, overrides.

Configs mirror the benchmark's YAML layout, e.g.::

    data:
      study:
        source.name: Mne2013SampleEeg
        split:
          name: SklearnSplit
          valid_split_ratio: 0.2
          test_split_ratio: 0.2
          stratify_by: description
      neuro.baseline: [0.0, 0.2]
      target:
        name: LabelEncoder
        event_types: Stimulus
        event_field: description
        return_one_hot: true
      trigger_event_type: Stimulus
      start: -0.2
      duration: 1.0
    loss.name: CrossEntropyLoss
    metrics: BalancedAcc

Keys containing dots are shorthand for nesting. Unknown keys are hard errors.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import yaml

from .domain import ObjectiveKind, canonical_json, hash_config


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


SPLIT_KINDS = ("Predefined", "LeaveConceptOut", "CrossSubject", "WithinSubject", "Random")
_SPLIT_ALIASES = {"SklearnSplit": "Random"}

LOSS_BY_OBJECTIVE = {
    ObjectiveKind.BINARY: "CrossEntropyLoss",
    ObjectiveKind.MULTICLASS: "CrossEntropyLoss",
    ObjectiveKind.MULTILABEL: "BCEWithLogitsLoss",
    ObjectiveKind.REGRESSION: "MSELoss",
    ObjectiveKind.RETRIEVAL: "ClipLoss",
}

DEFAULT_METRICS_BY_OBJECTIVE = {
    ObjectiveKind.BINARY: ("BalancedAcc",),
    ObjectiveKind.MULTICLASS: ("BalancedAcc",),
    ObjectiveKind.MULTILABEL: ("MacroF1",),
    ObjectiveKind.REGRESSION: ("PearsonR", "RMSE"),
    ObjectiveKind.RETRIEVAL: ("Top5Acc", "MedianRank"),
}

_OBJECTIVE_NAMES = {
    "binary": ObjectiveKind.BINARY,
    "multiclass": ObjectiveKind.MULTICLASS,
    "multilabel": ObjectiveKind.MULTILABEL,
    "regression": ObjectiveKind.REGRESSION,
    "retrieval": ObjectiveKind.RETRIEVAL,
}
_OBJECTIVE_KEYS = {v: k for k, v in _OBJECTIVE_NAMES.items()}

TARGET_CODECS = ("LabelEncoder", "MultiHotEncoder", "ScalarField", "ConceptEmbedding")


@dataclass(frozen=True)
class SplitPolicy:
    kind: str = "Random"
    test_ratio: float = 0.2
    valid_ratio: float = 0.2
    stratify_by: str | None = None
    holdout_spec: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ConfigError(f"unknown split kind {self.kind!r}; expected one of {SPLIT_KINDS}")
        if not 0 < self.test_ratio < 1:
            raise ConfigError(f"test_split_ratio must be in (0, 1), got {self.test_ratio}")
        if not 0 < self.valid_ratio < 1:
            raise ConfigError(f"valid_split_ratio must be in (0, 1), got {self.valid_ratio}")
        if self.test_ratio + self.valid_ratio >= 1:
            raise ConfigError(
                f"test + valid ratios must stay below 1, got {self.test_ratio + self.valid_ratio}"
            )


@dataclass(frozen=True)
class TrainerSpec:
    """The shared downstream training recipe."""

    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.10
    max_epochs: int = 50
    patience: int = 10
    batch_size: int = 64
    grad_clip: float | None = None
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.max_epochs <= 0:
            raise ConfigError("trainer lr/max_epochs must be positive, weight_decay >= 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.patience < 0 or self.batch_size <= 0:
            raise ConfigError("patience must be >= 0 and batch_size positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class TargetCodec:
    name: str
    event_field: str = "description"
    classes: tuple[str, ...] = ()
    return_one_hot: bool = False

    def __post_init__(self):
        if self.name not in TARGET_CODECS:
            raise ConfigError(f"unknown target codec {self.name!r}; expected one of {TARGET_CODECS}")
        object.__setattr__(self, "classes", tuple(self.classes))


@dataclass(frozen=True)
class DatasetSource:
    name: str
    root: str | None = None  # filesystem root, or None for synthetic:<profile> names

    @property
    def is_synthetic(self) -> bool:
        return self.name.startswith("synthetic:")

    @property
    def dataset_id(self) -> str:
        return self.name.split(":", 1)[1] if self.is_synthetic else self.name


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    source: DatasetSource
    split: SplitPolicy
    trigger_event_type: str
    start: float
    duration: float
    objective: ObjectiveKind
    target_codec: TargetCodec
    loss_name: str
    metric_names: tuple[str, ...]
    n_outputs: int | None = None
    baseline: tuple[float, float] | None = None
    category: str = "misc"
    extra_sources: tuple[DatasetSource, ...] = ()
    trainer: TrainerSpec = field(default_factory=TrainerSpec)

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")
        if self.baseline is not None:
            t0, t1 = self.baseline
            if not (0 <= t0 < t1 <= self.duration):
                raise ConfigError(
                    f"baseline interval {list(self.baseline)} must lie within [0, {self.duration}]"
                )
            object.__setattr__(self, "baseline", (float(t0), float(t1)))
        if not self.metric_names:
            raise ConfigError("metrics must be non-empty")
        expected_loss = LOSS_BY_OBJECTIVE[self.objective]
        if self.loss_name != expected_loss:
            raise ConfigError(
                f"loss.name {self.loss_name!r} incompatible with objective "
                f"{_OBJECTIVE_KEYS[self.objective]!r} (expected {expected_loss!r})"
            )
        if self.n_outputs is None and self.target_codec.name in ("ScalarField", "ConceptEmbedding"):
            if self.target_codec.name == "ScalarField":
                object.__setattr__(self, "n_outputs", 1)
            else:
                raise ConfigError("n_outputs is required for embedding targets")
        if self.n_outputs is not None and self.n_outputs <= 0:
            raise ConfigError(f"n_outputs must be positive, got {self.n_outputs}")
        object.__setattr__(self, "metric_names", tuple(self.metric_names))
        object.__setattr__(self, "extra_sources", tuple(self.extra_sources))

    @property
    def dataset_ids(self) -> tuple[str, ...]:
        return (self.source.dataset_id,) + tuple(s.dataset_id for s in self.extra_sources)

    def source_for(self, dataset_id: str) -> DatasetSource:
        for src in (self.source, *self.extra_sources):
            if src.dataset_id == dataset_id:
                return src
        raise ConfigError(f"task {self.task_id!r} has no dataset {dataset_id!r}")

    # -- canonical form -----------------------------------------------------

    def to_canonical_dict(self) -> dict:
        def source_dict(s: DatasetSource) -> dict:
            d = {"name": s.name}
            if s.root is not None:
                d["root"] = s.root
            return d

        split = {
            "name": self.split.kind,
            "test_split_ratio": self.split.test_ratio,
            "valid_split_ratio": self.split.valid_ratio,
            "seed": self.split.seed,
        }
        if self.split.stratify_by is not None:
            split["stratify_by"] = self.split.stratify_by
        if self.split.holdout_spec is not None:
            split["holdout"] = self.split.holdout_spec
        target = {"name": self.target_codec.name, "event_field": self.target_codec.event_field}
        if self.target_codec.classes:
            target["classes"] = list(self.target_codec.classes)
        if self.target_codec.return_one_hot:
            target["return_one_hot"] = True
        study = {"source": source_dict(self.source), "split": split}
        if self.extra_sources:
            study["extra_sources"] = [source_dict(s) for s in self.extra_sources]
        data = {
            "study": study,
            "target": target,
            "trigger_event_type": self.trigger_event_type,
            "start": self.start,
            "duration": self.duration,
        }
        if self.baseline is not None:
            data["neuro"] = {"baseline": list(self.baseline)}
        out = {
            "task_id": self.task_id,
            "category": self.category,
            "objective": _OBJECTIVE_KEYS[self.objective],
            "data": data,
            "loss": {"name": self.loss_name},
            "metrics": list(self.metric_names),
            "trainer": {
                "lr": self.trainer.lr,
                "weight_decay": self.trainer.weight_decay,
                "warmup_fraction": self.trainer.warmup_fraction,
                "max_epochs": self.trainer.max_epochs,
                "patience": self.trainer.patience,
                "batch_size": self.trainer.batch_size,
                "grad_clip": self.trainer.grad_clip,
                "seeds": list(self.trainer.seeds),
            },
        }
        if self.n_outputs is not None:
            out["n_outputs"] = self.n_outputs
        return out

    def canonical_text(self) -> str:
        return canonical_json(self.to_canonical_dict())

    def config_hash(self) -> int:
        return hash_config(self.canonical_text())


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _expand_dotted(obj):
    """Expand keys like "loss.name" into nested dicts, recursively."""
    if isinstance(obj, list):
        return [_expand_dotted(v) for v in obj]
    if not isinstance(obj, dict):
        return obj
    out: dict = {}
    for key, value in obj.items():
        if not isinstance(key, str):
            raise ConfigError(f"config keys must be strings, got {key!r}")
        value = _expand_dotted(value)
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {key!r} collides with a scalar value")
        leaf = parts[-1]
        if leaf in node and isinstance(node[leaf], dict) and isinstance(value, dict):
            node[leaf].update(value)
        elif leaf in node:
            raise ConfigError(f"duplicate key {key!r}")
        else:
            node[leaf] = value
    return out


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _take(d: dict, key: str, default=None, required=False, where=""):
    if key not in d:
        if required:
            raise ConfigError(f"missing required key {where + key!r}")
        return default
    return d.pop(key)


def _reject_unknown(d: dict, where: str):
    if d:
        raise ConfigError(f"unknown key(s) {sorted(d)} under {where or 'top level'}")


def _as_str_tuple(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    return tuple(str(v) for v in value)


def parse_task_config(text: str, task_id: str | None = None) -> TaskSpec:
    """Parse a YAML task document into a fully resolved TaskSpec.

    Defaults are applied, dotted keys expanded, and every constraint checked;
    unknown keys are rejected with the offending key named.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    if raw is None:
        raise ConfigError(
            "empty config; required keys: data.study.source.name, data.trigger_event_type, "
            "data.start, data.duration, loss.name, metrics"
        )
    if not isinstance(raw, dict):
        raise ConfigError("task config must be a mapping")
    return resolve_task_config(_expand_dotted(raw), task_id=task_id)


def resolve_task_config(cfg: dict, task_id: str | None = None) -> TaskSpec:
    """Validate and resolve an (already-nested) config dict into a TaskSpec."""
    cfg = {k: v for k, v in cfg.items()}  # shallow copy; we pop as we go

    data = _take(cfg, "data", required=True)
    _require(isinstance(data, dict), "'data' must be a mapping")
    data = dict(data)
    study = dict(_take(data, "study", required=True, where="data."))
    source_raw = _take(study, "source", required=True, where="data.study.")
    _require(isinstance(source_raw, dict) and "name" in source_raw, "data.study.source needs a name")
    source_raw = dict(source_raw)
    source = DatasetSource(name=str(source_raw.pop("name")), root=source_raw.pop("root", None))
    _reject_unknown(source_raw, "data.study.source")

    extra_sources = []
    for entry in _take(study, "extra_sources", default=[]) or []:
        entry = dict(entry)
        extra_sources.append(DatasetSource(name=str(entry.pop("name")), root=entry.pop("root", None)))
        _reject_unknown(entry, "data.study.extra_sources[]")

    split_raw = dict(_take(study, "split", default={}))
    kind = str(_take(split_raw, "name", default="Random"))
    kind = _SPLIT_ALIASES.get(kind, kind)
    stratify = _take(split_raw, "stratify_by")
    split = SplitPolicy(
        kind=kind,
        test_ratio=float(_take(split_raw, "test_split_ratio", default=0.2)),
        valid_ratio=float(_take(split_raw, "valid_split_ratio", default=0.2)),
        stratify_by=None if stratify is None else str(stratify),
        holdout_spec=_take(split_raw, "holdout"),
        seed=int(_take(split_raw, "seed", default=0)),
    )
    _reject_unknown(split_raw, "data.study.split")
    _reject_unknown(study, "data.study")

    neuro = dict(_take(data, "neuro", default={}))
    baseline = _take(neuro, "baseline")
    if baseline is not None:
        _require(
            isinstance(baseline, (list, tuple)) and len(baseline) == 2,
            "neuro.baseline must be a [t0, t1] pair",
        )
        baseline = (float(baseline[0]), float(baseline[1]))
    _reject_unknown(neuro, "data.neuro")

    target_raw = dict(_take(data, "target", default={"name": "LabelEncoder"}))
    codec_name = str(_take(target_raw, "name", required=True, where="data.target."))
    event_types = _as_str_tuple(_take(target_raw, "event_types"))
    codec = TargetCodec(
        name=codec_name,
        event_field=str(_take(target_raw, "event_field", default="description")),
        classes=_as_str_tuple(_take(target_raw, "classes")),
        return_one_hot=bool(_take(target_raw, "return_one_hot", default=False)),
    )
    _reject_unknown(target_raw, "data.target")

    trigger = _take(data, "trigger_event_type", required=True, where="data.")
    if event_types and str(trigger) not in event_types:
        raise ConfigError(
            f"target.event_types {list(event_types)} does not include trigger_event_type {trigger!r}"
        )
    start = float(_take(data, "start", required=True, where="data."))
    duration = float(_take(data, "duration", required=True, where="data."))
    _reject_unknown(data, "data")

    loss_raw = dict(_take(cfg, "loss", required=True))
    loss_name = str(_take(loss_raw, "name", required=True, where="loss."))
    _reject_unknown(loss_raw, "loss")

    metrics = _as_str_tuple(_take(cfg, "metrics", required=True))
    _require(len(metrics) > 0, "metrics must be non-empty")

    objective_key = _take(cfg, "objective")
    if objective_key is None:
        for obj, loss in LOSS_BY_OBJECTIVE.items():
            if loss == loss_name and obj is not ObjectiveKind.BINARY:
                objective = obj
                break
        else:
            raise ConfigError(f"unknown loss {loss_name!r}; cannot infer objective")
    else:
        _require(objective_key in _OBJECTIVE_NAMES, f"unknown objective {objective_key!r}")
        objective = _OBJECTIVE_NAMES[objective_key]

    n_outputs = _take(cfg, "n_outputs")
    category = str(_take(cfg, "category", default="misc"))
    explicit_task_id = _take(cfg, "task_id")

    trainer_raw = dict(_take(cfg, "trainer", default={}))
    trainer_kwargs = {}
    for key in ("lr", "weight_decay", "warmup_fraction", "max_epochs", "patience",
                "batch_size", "grad_clip", "seeds"):
        if key in trainer_raw:
            trainer_kwargs[key] = trainer_raw.pop(key)
    if "seeds" in trainer_kwargs:
        trainer_kwargs["seeds"] = tuple(int(s) for s in trainer_kwargs["seeds"])
    _reject_unknown(trainer_raw, "trainer")
    trainer = TrainerSpec(**trainer_kwargs)

    _reject_unknown(cfg, "")

    resolved_id = explicit_task_id or task_id or _snake(source.dataset_id)
    return TaskSpec(
        task_id=str(resolved_id),
        source=source,
        extra_sources=tuple(extra_sources),
        split=split,
        trigger_event_type=str(trigger),
        start=start,
        duration=duration,
        objective=objective,
        target_codec=codec,
        loss_name=loss_name,
        metric_names=metrics,
        n_outputs=None if n_outputs is None else int(n_outputs),
        baseline=baseline,
        category=category,
        trainer=trainer,
    )


def _snake(name: str) -> str:
    out = []
    for i, ch in enumerate(name):
        if ch.isupper() and i > 0 and not name[i - 1].isupper():
            out.append("_")
        out.append(ch.lower())
    return "".join(out)


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------

def apply_overrides(spec: TaskSpec, overrides: list[str]) -> TaskSpec:
    """Apply `a.b.c=value` overrides to a spec and revalidate.

    Values are parsed as YAML scalars. Paths must resolve to existing fields
    of the canonical config; the rebuilt spec goes through full validation.
    """
    cfg = spec.to_canonical_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like path.to.key=value")
        path, _, value_text = item.partition("=")
        tokens = [t for t in path.strip().split(".") if t]
        if not tokens:
            raise ConfigError(f"override {item!r} has an empty path")
        try:
            value = yaml.safe_load(value_text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override value {value_text!r} is not a YAML scalar: {exc}") from exc
        node = cfg
        for tok in tokens[:-1]:
            if not isinstance(node, dict) or tok not in node:
                raise ConfigError(f"unknown override path {path!r} (at {tok!r})")
            node = node[tok]
        leaf = tokens[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown override path {path!r} (at {leaf!r})")
        old = node[leaf]
        if old is not None and value is not None and not _types_compatible(old, value):
            raise ConfigError(
                f"override {path!r}: type mismatch ({type(value).__name__} vs "
                f"{type(old).__name__})"
            )
        node[leaf] = value
    return resolve_task_config(cfg)


def _types_compatible(old, new) -> bool:
    numeric = (int, float)
    if isinstance(old, bool) or isinstance(new, bool):
        return isinstance(old, bool) and isinstance(new, bool)
    if isinstance(old, numeric) and isinstance(new, numeric):
        return True
    return type(old) is type(new)


# ---------------------------------------------------------------------------
# Built-in registry
# ---------------------------------------------------------------------------

def builtin_task_registry() -> list[TaskSpec]:
    """All tasks shipped with the engine (synthetic sources, one per objective kind)."""
    specs = []
    root = importlib.resources.files("decodebench").joinpath("tasks")
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".yaml"):
            specs.append(parse_task_config(entry.read_text(encoding="utf-8")))
    return specs


def get_task(task_id: str) -> TaskSpec:
    for spec in builtin_task_registry():
        if spec.task_id == task_id:
            return spec
    known = [s.task_id for s in builtin_task_registry()]
    raise ConfigError(f"unknown task {task_id!r}; valid ids: {known}")
