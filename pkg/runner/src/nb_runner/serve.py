"""Protocol-v1 message loop over stdio.

State resets on every task offer; all randomness derives from the offer's
seed. Failures are reported with `error` messages, never by a silent exit.
"""

from __future__ import annotations

import json
import sys

from .cachefmt import read_cache, read_split_manifest
from .models import OBJECTIVES, DummyModel, LinearModel

PROTOCOL_VERSION = 1
MAX_EMBEDDING_DIM = 4096


class _Session:
    def __init__(self, mode: str, objectives, model_factory=None,
                 deviations=None, pretrained_on=()):
        self.mode = mode
        self.objectives = list(objectives or OBJECTIVES)
        self.model_factory = model_factory
        self.deviations = dict(deviations or {})
        self.pretrained_on = list(pretrained_on)
        self.reset()

    def reset(self):
        self.offer = None
        self.example_set = None
        self.manifest = None
        self.model = None
        self.trained = False


def serve(mode: str = "dummy", objectives=None, model_factory=None,
          deviations=None, pretrained_on=(), stdin=None, stdout=None) -> None:
    """Run the message loop until `bye` or EOF."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    seq = [0]

    def send(kind: str, payload: dict):
        msg = {"v": PROTOCOL_VERSION, "kind": kind, "seq": seq[0],
               "payload": payload}
        seq[0] += 1
        stdout.write(json.dumps(msg, sort_keys=True,
                                separators=(",", ":")).encode("utf-8") + b"\n")
        stdout.flush()

    session = _Session(mode, objectives, model_factory, deviations, pretrained_on)

    for raw in stdin:
        try:
            msg = json.loads(raw)
            kind = msg["kind"]
            payload = msg.get("payload", {})
        except (ValueError, KeyError) as exc:
            send("error", {"message": f"malformed message: {exc}"})
            continue
        try:
            if kind == "hello":
                send("capabilities", {
                    "max_embedding_dim": MAX_EMBEDDING_DIM,
                    "objectives": session.objectives,
                    "preprocessing": "engine",
                    "pretrained_on": session.pretrained_on,
                })
            elif kind == "task_offer":
                session.reset()
                session.offer = payload
                objective = payload.get("objective")
                if objective not in session.objectives:
                    send("progress", {"phase": "offer", "status": "decline",
                                      "reason": f"unsupported objective: {objective}"})
                    continue
                n_out = payload.get("n_outputs") or 1
                if objective == "retrieval" and n_out > MAX_EMBEDDING_DIM:
                    send("progress", {"phase": "offer", "status": "decline",
                                      "reason": f"embedding dim {n_out} exceeds "
                                                f"{MAX_EMBEDDING_DIM}"})
                    continue
                send("progress", {"phase": "offer", "status": "accept"})
            elif kind == "data_manifest":
                session.example_set = read_cache(payload["cache_path"])
                session.manifest = read_split_manifest(
                    payload["split_manifest_path"])
            elif kind == "train_request":
                if session.offer is None or session.example_set is None:
                    send("error", {"message": "train_request before offer/manifest"})
                    continue
                session.model = _build_model(session)
                if session.mode == "linear":
                    def progress(epoch, metric):
                        send("progress", {"phase": "train", "epoch": epoch,
                                          "metric": metric})
                    session.model.train(session.example_set, progress=progress)
                else:
                    session.model.train(session.example_set)
                session.trained = True
                send("progress", {"phase": "train", "status": "complete",
                                  "deviations": session.deviations})
            elif kind == "predict_request":
                if not session.trained:
                    send("error", {"message": "predict_request before training"})
                    continue
                split = payload.get("split", "test")
                idx = session.example_set.indices(split)
                values = session.model.predict(session.example_set, idx)
                send("predictions", {"split": split, "values": values,
                                     "deviations": session.deviations})
            elif kind == "bye":
                break
            else:
                send("error", {"message": f"unsupported message kind {kind!r}"})
        except Exception as exc:  # noqa: BLE001 - report, never die silently
            send("error", {"message": f"{type(exc).__name__}: {exc}"})


def _build_model(session: _Session):
    offer = session.offer
    objective = offer["objective"]
    seed = int(offer.get("seed", 0))
    if session.model_factory is not None:
        return session.model_factory(offer)
    if session.mode == "dummy":
        return DummyModel(objective, seed)
    if session.mode == "linear":
        return LinearModel(
            objective=objective,
            n_outputs=int(offer.get("n_outputs") or 1),
            loss_name=offer.get("loss_name", "MSELoss"),
            metric_name=(offer.get("metric_names") or ["BalancedAcc"])[0],
            recipe=offer.get("recipe", {}),
            seed=seed,
        )
    raise ValueError(f"unknown mode {session.mode!r}")
