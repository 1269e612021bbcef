"""Adapter behavior: wrapped callables become conforming runners; shape
mismatches surface as protocol errors naming the expected output count."""

import io
import json

import numpy as np
import pytest

from nb_runner.adapter import wrap_external_model
from nb_runner.models import top5_accuracy

GOLDEN_OFFER = {
    "task_id": "t", "dataset_id": "d", "objective": "retrieval",
    "n_outputs": 8, "loss_name": "ClipLoss", "metric_names": ["Top5Acc"],
    "seed": 0, "recipe": {},
}


def drive(run, messages):
    """Feed protocol lines through the in-process loop; return replies."""
    stdin = io.BytesIO()
    for seq, (kind, payload) in enumerate(messages):
        line = json.dumps({"v": 1, "kind": kind, "seq": seq, "payload": payload})
        stdin.write(line.encode() + b"\n")
    stdin.seek(0)
    stdout = io.BytesIO()
    run(stdin=stdin, stdout=stdout)
    return [json.loads(l) for l in stdout.getvalue().splitlines()]


@pytest.fixture
def retrieval_cache(tmp_path):
    from decodebench.data import write_cache
    from decodebench.domain import Embedding, ExampleSet
    from decodebench.split import split_manifest, write_manifest

    rng = np.random.default_rng(5)
    n, d = 12, 8
    vecs = rng.normal(size=(6, d)).astype(np.float32)
    windows = np.zeros((n, 2, 4), dtype=np.float32)
    # embed the target's first 8 values into the flattened window
    for i in range(n):
        windows[i].flat[:d] = vecs[i % 6]
    es = ExampleSet(
        windows=windows,
        targets=tuple(Embedding(vecs[i % 6]) for i in range(n)),
        subject_ids=tuple(f"s{i // 6}" for i in range(n)),
        session_ids=tuple("sess_0" for _ in range(n)),
        concept_ids=tuple(f"c{i % 6}" for i in range(n)),
        split_labels=tuple(["train"] * 6 + ["valid"] * 2 + ["test"] * 4),
        sfreq=120.0, window_start=0.0, duration=4 / 120.0,
    )
    cache = tmp_path / "set.nbch"
    manifest = tmp_path / "split.json"
    write_cache(es, cache)
    write_manifest(split_manifest(es, "t", "d", 0), manifest)
    return es, cache, manifest


def _session_messages(cache, manifest, offer=GOLDEN_OFFER):
    return [
        ("hello", {"engine": "decodebench", "protocol_version": 1}),
        ("task_offer", offer),
        ("data_manifest", {"cache_path": str(cache),
                           "split_manifest_path": str(manifest)}),
        ("train_request", {}),
        ("predict_request", {"split": "test"}),
        ("bye", {}),
    ]


class TestWrappedModel:
    def test_identity_embedding_matches_engine_oracle(self, retrieval_cache):
        es, cache, manifest = retrieval_cache

        def identity_embedding(batch):
            return batch.reshape(len(batch), -1)[:, :8]

        run = wrap_external_model(identity_embedding)
        replies = drive(run, _session_messages(cache, manifest))
        preds_msg = next(r for r in replies if r["kind"] == "predictions")
        values = np.asarray(preds_msg["payload"]["values"])

        test_idx = [i for i, l in enumerate(es.split_labels) if l == "test"]
        targets = np.stack([np.asarray(es.targets[i].values, dtype=np.float64)
                            for i in test_idx])
        assert np.allclose(values, targets, atol=1e-6)

        # engine-computed top-k on these predictions equals a direct oracle
        from decodebench.domain import EmbeddingPred, ObjectiveKind
        from decodebench.metrics import evaluate_predictions

        engine_vals = evaluate_predictions(
            ObjectiveKind.RETRIEVAL,
            [es.targets[i] for i in test_idx],
            [EmbeddingPred(v) for v in values],
            ("Top5Acc",),
            subject_ids=[es.subject_ids[i] for i in test_idx],
            concept_ids=[es.concept_ids[i] for i in test_idx])
        concepts = sorted({es.concept_ids[i] for i in test_idx})
        cands = np.stack([next(np.asarray(es.targets[i].values)
                               for i in test_idx if es.concept_ids[i] == c)
                          for c in concepts])
        true_idx = np.array([concepts.index(es.concept_ids[i]) for i in test_idx])
        oracle = top5_accuracy(values, cands, true_idx)
        assert engine_vals["Top5Acc"] == oracle == 1.0

    def test_wrong_output_dim_names_expected(self, retrieval_cache):
        _, cache, manifest = retrieval_cache

        def bad_model(batch):
            return np.zeros((len(batch), 3))

        run = wrap_external_model(bad_model)
        replies = drive(run, _session_messages(cache, manifest))
        error = next(r for r in replies if r["kind"] == "error")
        assert "expected" in error["payload"]["message"]
        assert "8" in error["payload"]["message"]

    def test_declared_deviations_travel_in_predictions(self, retrieval_cache):
        _, cache, manifest = retrieval_cache

        def identity_embedding(batch):
            return batch.reshape(len(batch), -1)[:, :8]

        run = wrap_external_model(identity_embedding,
                                  deviations={"grad_clip": 0.5})
        replies = drive(run, _session_messages(cache, manifest))
        preds = next(r for r in replies if r["kind"] == "predictions")
        assert preds["payload"]["deviations"] == {"grad_clip": 0.5}
