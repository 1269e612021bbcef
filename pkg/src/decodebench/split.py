"""Train/valid/test assignment strategies.

Every strategy partitions the example set (each example gets exactly one
label), is a pure function of the example tags, the policy and the seed, and
targets `test_ratio` / `valid_ratio` of the *overall* set for the held-out
portions. Rounding is half-up with a floor of one unit per non-empty split.
Units are shuffled by a seeded Fisher-Yates over lexicographically sorted ids
so ingestion order can never change a split.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .config import SplitPolicy
from .domain import TEST, TRAIN, VALID, ClassIndex, ExampleSet, canonical_json, hash_config


class SplitError(ValueError):
    """Unsatisfiable split request."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _carve_counts(n_units: int, test_ratio: float, valid_ratio: float) -> tuple[int, int]:
    n_test = max(1, _round_half_up(test_ratio * n_units))
    n_valid = max(1, _round_half_up(valid_ratio * n_units))
    if n_test + n_valid >= n_units:
        raise SplitError(
            f"cannot carve test={n_test} and valid={n_valid} out of {n_units} units"
        )
    return n_test, n_valid


def _shuffled(ids, seed: int) -> list:
    ordered = sorted(ids)
    rng = np.random.default_rng(seed)
    # Fisher-Yates so the permutation depends only on (sorted ids, seed)
    for i in range(len(ordered) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        ordered[i], ordered[j] = ordered[j], ordered[i]
    return ordered


def _labels_from_unit_assignment(es: ExampleSet, unit_of, assignment: dict) -> ExampleSet:
    labels = []
    for i in range(es.n_examples):
        labels.append(assignment[unit_of(i)])
    return es.with_split_labels(labels)


def _example_class(es: ExampleSet, i: int) -> str:
    t = es.targets[i]
    if isinstance(t, ClassIndex):
        return str(t.value)
    return ""  # stratification falls back to a single stratum


def split_predefined(es: ExampleSet, assignment: dict) -> ExampleSet:
    """Copy an explicit example-id -> label map (ids are example indices)."""
    labels = []
    for i in range(es.n_examples):
        key = i if i in assignment else str(i)
        if key not in assignment:
            raise SplitError(f"predefined split does not cover example {i}")
        label = assignment[key]
        if label not in (TRAIN, VALID, TEST):
            raise SplitError(f"example {i}: unknown split label {label!r}")
        labels.append(label)
    return es.with_split_labels(labels)


def _split_units(units: list, strata: dict, test_ratio: float, valid_ratio: float,
                 seed: int) -> dict:
    """Assign units (subjects/concepts/examples) to splits, optionally stratified.

    `strata` maps unit -> stratum key; single-stratum when all keys equal.
    Greedy per-stratum assignment, largest stratum first; per-stratum counts
    are within +-1 of round(ratio x stratum size).
    """
    n_test, n_valid = _carve_counts(len(units), test_ratio, valid_ratio)
    by_stratum: dict = {}
    for u in units:
        by_stratum.setdefault(strata[u], []).append(u)
    ordered_strata = sorted(by_stratum, key=lambda s: (-len(by_stratum[s]), str(s)))

    assignment: dict = {}
    taken_test = taken_valid = 0
    for si, s in enumerate(ordered_strata):
        members = _shuffled(by_stratum[s], seed + si)
        remaining_strata = ordered_strata[si + 1:]
        remaining_units = sum(len(by_stratum[r]) for r in remaining_strata)
        want_test = _round_half_up(test_ratio * len(members))
        want_valid = _round_half_up(valid_ratio * len(members))
        # keep global totals reachable
        want_test = min(want_test, n_test - taken_test)
        want_valid = min(want_valid, n_valid - taken_valid)
        if remaining_units == 0:
            want_test = n_test - taken_test
            want_valid = n_valid - taken_valid
        if want_test + want_valid > len(members):
            raise SplitError(f"stratum {s!r} too small for the requested ratios")
        for u in members[:want_test]:
            assignment[u] = TEST
        for u in members[want_test:want_test + want_valid]:
            assignment[u] = VALID
        for u in members[want_test + want_valid:]:
            assignment[u] = TRAIN
        taken_test += want_test
        taken_valid += want_valid
    return assignment


def split_cross_subject(es: ExampleSet, test_ratio: float, valid_ratio: float,
                        stratify_by: str | None = None, seed: int = 0) -> ExampleSet:
    """Hold out whole subjects; subject sets of the three splits are disjoint."""
    subjects = sorted(set(es.subject_ids))
    if len(subjects) < 3:
        raise SplitError(f"cross-subject split needs >= 3 subjects, got {len(subjects)}")
    if stratify_by:
        # stratify on the subject's majority class
        per_subject: dict[str, list[str]] = {s: [] for s in subjects}
        for i in range(es.n_examples):
            per_subject[es.subject_ids[i]].append(_example_class(es, i))
        strata = {s: max(set(v), key=v.count) for s, v in per_subject.items()}
    else:
        strata = {s: "" for s in subjects}
    assignment = _split_units(subjects, strata, test_ratio, valid_ratio, seed)
    return _labels_from_unit_assignment(es, lambda i: es.subject_ids[i], assignment)


def split_leave_concept_out(es: ExampleSet, test_ratio: float, valid_ratio: float,
                            seed: int = 0) -> ExampleSet:
    """Hold out stimulus concepts; no concept spans two splits."""
    if any(c is None for c in es.concept_ids):
        raise SplitError("leave-concept-out requires concept_ids on every example")
    concepts = sorted(set(es.concept_ids))
    if len(concepts) < 3:
        raise SplitError(f"leave-concept-out needs >= 3 concepts, got {len(concepts)}")
    strata = {c: "" for c in concepts}
    assignment = _split_units(concepts, strata, test_ratio, valid_ratio, seed)
    return _labels_from_unit_assignment(es, lambda i: es.concept_ids[i], assignment)


def split_within_subject(es: ExampleSet, holdout_spec: str) -> ExampleSet:
    """Per subject, the trailing sessions become Test (and the ones before, Valid).

    `holdout_spec` is "last:<k_test>[,<k_valid>]"; k_valid defaults to 1.
    """
    k_test, k_valid = _parse_holdout(holdout_spec)
    labels = [""] * es.n_examples
    per_subject: dict[str, set[str]] = {}
    for i in range(es.n_examples):
        per_subject.setdefault(es.subject_ids[i], set()).add(es.session_ids[i])
    session_rank = {}
    for subj, sessions in per_subject.items():
        ordered = sorted(sessions)
        if len(ordered) < k_test + k_valid + 1:
            raise SplitError(
                f"subject {subj!r} has {len(ordered)} session(s); needs at least "
                f"{k_test + k_valid + 1} for holdout {holdout_spec!r}"
            )
        for rank, sess in enumerate(ordered):
            tail = len(ordered) - rank
            if tail <= k_test:
                session_rank[(subj, sess)] = TEST
            elif tail <= k_test + k_valid:
                session_rank[(subj, sess)] = VALID
            else:
                session_rank[(subj, sess)] = TRAIN
    for i in range(es.n_examples):
        labels[i] = session_rank[(es.subject_ids[i], es.session_ids[i])]
    return es.with_split_labels(labels)


def _parse_holdout(spec: str) -> tuple[int, int]:
    if not spec or not spec.startswith("last:"):
        raise SplitError(f"holdout spec {spec!r} must look like 'last:<k>[,<m>]'")
    body = spec[len("last:"):]
    parts = body.split(",")
    try:
        k_test = int(parts[0])
        k_valid = int(parts[1]) if len(parts) > 1 else 1
    except ValueError as exc:
        raise SplitError(f"holdout spec {spec!r} is not numeric") from exc
    if k_test < 1 or k_valid < 0:
        raise SplitError(f"holdout spec {spec!r} must hold out at least one session")
    return k_test, k_valid


def split_random(es: ExampleSet, test_ratio: float, valid_ratio: float,
                 stratify_by: str | None = None, seed: int = 0) -> ExampleSet:
    """Example-level split; stratification keeps class ratios within +-1."""
    n = es.n_examples
    if n < 3:
        raise SplitError(f"random split needs >= 3 examples, got {n}")
    indices = list(range(n))
    if stratify_by:
        strata = {i: _example_class(es, i) for i in indices}
    else:
        strata = {i: "" for i in indices}
    assignment = _split_units(indices, strata, test_ratio, valid_ratio, seed)
    return _labels_from_unit_assignment(es, lambda i: i, assignment)


def apply_split(es: ExampleSet, policy: SplitPolicy, assignment: dict | None = None
                ) -> ExampleSet:
    """Dispatch on the policy kind."""
    if policy.kind == "Predefined":
        if assignment is None:
            raise SplitError("Predefined policy needs an assignment map")
        return split_predefined(es, assignment)
    if policy.kind == "CrossSubject":
        return split_cross_subject(es, policy.test_ratio, policy.valid_ratio,
                                   policy.stratify_by, policy.seed)
    if policy.kind == "LeaveConceptOut":
        return split_leave_concept_out(es, policy.test_ratio, policy.valid_ratio,
                                       policy.seed)
    if policy.kind == "WithinSubject":
        return split_within_subject(es, policy.holdout_spec or "last:1")
    if policy.kind == "Random":
        return split_random(es, policy.test_ratio, policy.valid_ratio,
                            policy.stratify_by, policy.seed)
    raise SplitError(f"unknown split kind {policy.kind!r}")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def split_manifest(es: ExampleSet, task_id: str = "", dataset_id: str = "",
                   seed: int = 0) -> dict:
    """JSON-serializable example-id -> label manifest for the runner protocol."""
    return {
        "version": 1,
        "task_id": task_id,
        "dataset_id": dataset_id,
        "split_seed": seed,
        "labels": {str(i): es.split_labels[i] for i in range(es.n_examples)},
    }


def manifest_hash(manifest: dict) -> int:
    return hash_config(canonical_json(manifest))


def write_manifest(manifest: dict, path) -> None:
    from pathlib import Path

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
