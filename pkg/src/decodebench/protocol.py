"""Wire protocol v1 for external model runners.

Newline-delimited JSON over the runner's stdio. Every message carries
`v` (protocol version), `kind`, `seq` (strictly increasing per direction) and
a kind-specific `payload`. Bulk tensors never travel inline: the engine sends
cache-file and split-manifest paths. See PROTOCOL.md for the choreography.
"""

from __future__ import annotations

import json
import logging
import selectors
import subprocess
import time
from dataclasses import dataclass

import numpy as np

from .domain import (
    ClassProbs,
    EmbeddingPred,
    LabelProbs,
    ObjectiveKind,
    Prediction,
    ScalarPred,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_MESSAGE_BYTES = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0

KINDS = ("hello", "capabilities", "task_offer", "data_manifest", "train_request",
         "predict_request", "predictions", "progress", "error", "bye")


class ProtocolError(RuntimeError):
    """Violation of the wire contract by either side."""


@dataclass(frozen=True)
class Message:
    v: int
    kind: str
    seq: int
    payload: dict

    def to_json(self) -> dict:
        return {"v": self.v, "kind": self.kind, "seq": self.seq, "payload": self.payload}


def encode_message(msg: Message) -> bytes:
    if msg.kind not in KINDS:
        raise ProtocolError(f"unknown message kind {msg.kind!r}")
    line = json.dumps(msg.to_json(), sort_keys=True, separators=(",", ":"))
    data = line.encode("utf-8") + b"\n"
    if len(data) > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"message of {len(data)} bytes exceeds the "
                            f"{MAX_MESSAGE_BYTES}-byte cap")
    return data


def decode_message(line: bytes) -> Message:
    if len(line) > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"message of {len(line)} bytes exceeds the "
                            f"{MAX_MESSAGE_BYTES}-byte cap")
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed message: {exc}") from exc
    for key in ("v", "kind", "seq", "payload"):
        if key not in obj:
            raise ProtocolError(f"message missing field {key!r}: {obj}")
    if obj["kind"] not in KINDS:
        raise ProtocolError(f"unknown message kind {obj['kind']!r}")
    if not isinstance(obj["payload"], dict):
        raise ProtocolError("payload must be an object")
    return Message(v=int(obj["v"]), kind=obj["kind"], seq=int(obj["seq"]),
                   payload=obj["payload"])


class RunnerProcess:
    """One external runner with seq bookkeeping and timeouts.

    The command is either an argv list (spawned on stdio pipes, the default
    transport) or a single `tcp://host:port` entry (connects to an
    already-running runner).
    """

    def __init__(self, command: list[str], timeout: float = DEFAULT_TIMEOUT):
        self.command = list(command)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._socket = None
        self._reader = None
        self._writer = None
        self._send_seq = 0
        self._recv_seq = -1
        self._buffer = b""

    @property
    def _is_tcp(self) -> bool:
        return len(self.command) == 1 and self.command[0].startswith("tcp://")

    def start(self) -> None:
        if self._is_tcp:
            import socket

            host, _, port = self.command[0][len("tcp://"):].partition(":")
            self._socket = socket.create_connection((host, int(port)),
                                                    timeout=self.timeout)
            self._socket.settimeout(None)
            self._reader = self._socket.makefile("rb")
            self._writer = self._socket.makefile("wb")
        else:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
            self._reader = self._proc.stdout
            self._writer = self._proc.stdin

    @property
    def alive(self) -> bool:
        if self._is_tcp:
            return self._socket is not None
        return self._proc is not None and self._proc.poll() is None

    def send(self, kind: str, payload: dict) -> Message:
        if self._writer is None:
            raise ProtocolError("runner not started")
        msg = Message(v=PROTOCOL_VERSION, kind=kind, seq=self._send_seq, payload=payload)
        self._send_seq += 1
        try:
            self._writer.write(encode_message(msg))
            self._writer.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolError(f"runner pipe closed while sending {kind}: {exc}") from exc
        return msg

    def recv(self, timeout: float | None = None) -> Message:
        if self._reader is None:
            raise ProtocolError("runner not started")
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        sel = selectors.DefaultSelector()
        sel.register(self._reader, selectors.EVENT_READ)
        try:
            while b"\n" not in self._buffer:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ProtocolError(
                        f"timeout after {self.timeout if timeout is None else timeout:.0f}s "
                        f"waiting for the runner"
                    )
                if len(self._buffer) > MAX_MESSAGE_BYTES:
                    raise ProtocolError("runner exceeded the message size cap")
                if not sel.select(timeout=min(remaining, 0.25)):
                    continue
                chunk = self._reader.read1(65536)
                if not chunk:
                    raise ProtocolError("runner closed its output stream")
                self._buffer += chunk
        finally:
            sel.close()
        line, self._buffer = self._buffer.split(b"\n", 1)
        msg = decode_message(line)
        if msg.seq <= self._recv_seq:
            raise ProtocolError(
                f"runner seq went backwards ({msg.seq} after {self._recv_seq})"
            )
        self._recv_seq = msg.seq
        return msg

    def close(self) -> None:
        if self.alive:
            try:
                self.send("bye", {})
            except ProtocolError:
                pass
        if self._is_tcp:
            if self._socket is not None:
                try:
                    self._writer.close()
                    self._reader.close()
                    self._socket.close()
                except OSError:
                    pass
                self._socket = None
            return
        if self._proc is None:
            return
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=5.0)
        except (subprocess.TimeoutExpired, OSError):
            self._proc.kill()
            self._proc.wait()
        finally:
            self._proc = None


# ---------------------------------------------------------------------------
# Engine-side session
# ---------------------------------------------------------------------------

class RunnerSession:
    """Drives one runner through handshake -> offer -> train -> predict."""

    def __init__(self, process: RunnerProcess):
        self.process = process
        self.capabilities: dict = {}

    def handshake(self, timeout: float | None = None) -> dict:
        self.process.send("hello", {"engine": "decodebench",
                                    "protocol_version": PROTOCOL_VERSION})
        reply = self.process.recv(timeout=timeout)
        if reply.kind == "error":
            raise ProtocolError(f"runner error during handshake: {reply.payload}")
        if reply.kind != "capabilities":
            raise ProtocolError(f"expected capabilities, got {reply.kind!r}")
        if reply.v != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch: engine speaks {PROTOCOL_VERSION}, "
                f"runner replied {reply.v}"
            )
        self.capabilities = reply.payload
        return reply.payload

    def offer_task(self, offer_payload: dict, manifest_payload: dict
                   ) -> tuple[bool, str]:
        """Offer a task plus its data manifest. Returns (accepted, reason)."""
        for path_key in ("cache_path", "split_manifest_path"):
            path = manifest_payload.get(path_key)
            if path is not None:
                from pathlib import Path

                if not Path(path).exists():
                    raise ProtocolError(f"{path_key} {path!r} missing on disk")
        self.process.send("task_offer", offer_payload)
        reply = self.process.recv()
        if reply.kind == "error":
            raise ProtocolError(f"runner error on task offer: {reply.payload}")
        if reply.kind != "progress" or reply.payload.get("phase") != "offer":
            raise ProtocolError(f"malformed offer response: {reply.to_json()}")
        status = reply.payload.get("status")
        if status == "decline":
            return False, str(reply.payload.get("reason", "unspecified"))
        if status != "accept":
            raise ProtocolError(f"offer status must be accept/decline, got {status!r}")
        self.process.send("data_manifest", manifest_payload)
        return True, ""

    def request_training(self, timeout: float | None = None) -> dict:
        """Run the training phase; returns declared recipe deviations."""
        self.process.send("train_request", {})
        deviations: dict = {}
        while True:
            msg = self.process.recv(timeout=timeout)
            if msg.kind == "error":
                raise ProtocolError(f"runner error during training: {msg.payload}")
            if msg.kind != "progress":
                raise ProtocolError(f"expected progress, got {msg.kind!r}")
            if msg.payload.get("phase") != "train":
                raise ProtocolError(f"unexpected progress phase: {msg.payload}")
            if msg.payload.get("status") == "complete":
                deviations = dict(msg.payload.get("deviations") or {})
                return deviations

    def collect_predictions(self, split: str, objective: ObjectiveKind,
                            n_expected: int, timeout: float | None = None
                            ) -> tuple[list[Prediction], dict]:
        """One prediction per split example, in manifest order."""
        if split not in ("valid", "test"):
            raise ProtocolError(f"split must be valid or test, got {split!r}")
        self.process.send("predict_request", {"split": split})
        msg = self.process.recv(timeout=timeout)
        if msg.kind == "error":
            raise ProtocolError(f"runner error during prediction: {msg.payload}")
        if msg.kind != "predictions":
            raise ProtocolError(f"expected predictions, got {msg.kind!r}")
        rows = msg.payload.get("values")
        if not isinstance(rows, list):
            raise ProtocolError("predictions payload needs a 'values' list")
        if len(rows) != n_expected:
            raise ProtocolError(
                f"prediction count mismatch: got {len(rows)}, expected {n_expected}"
            )
        preds = []
        for i, row in enumerate(rows):
            arr = np.asarray(row, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ProtocolError(f"non-finite prediction at example {i}")
            try:
                preds.append(_prediction_from_row(arr, objective))
            except ValueError as exc:
                raise ProtocolError(f"bad prediction at example {i}: {exc}") from exc
        deviations = dict(msg.payload.get("deviations") or {})
        return preds, deviations


def _prediction_from_row(arr: np.ndarray, objective: ObjectiveKind) -> Prediction:
    if objective in (ObjectiveKind.BINARY, ObjectiveKind.MULTICLASS):
        return ClassProbs(arr)
    if objective is ObjectiveKind.MULTILABEL:
        return LabelProbs(arr)
    if objective is ObjectiveKind.REGRESSION:
        return ScalarPred(float(arr.reshape(-1)[0]))
    if objective is ObjectiveKind.RETRIEVAL:
        return EmbeddingPred(arr)
    raise ProtocolError(f"unhandled objective {objective}")


def build_task_offer(task, dataset_id: str, seed: int) -> dict:
    """The offer payload: task identity plus the shared recipe fields."""
    trainer = task.trainer
    return {
        "task_id": task.task_id,
        "dataset_id": dataset_id,
        "objective": task.objective.value,
        "n_outputs": task.n_outputs,
        "loss_name": task.loss_name,
        "metric_names": list(task.metric_names),
        "seed": seed,
        "recipe": {
            "lr": trainer.lr,
            "weight_decay": trainer.weight_decay,
            "warmup_fraction": trainer.warmup_fraction,
            "max_epochs": trainer.max_epochs,
            "patience": trainer.patience,
            "batch_size": trainer.batch_size,
            "grad_clip": trainer.grad_clip,
        },
    }
