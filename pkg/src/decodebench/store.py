"""Append-only JSON-lines results store with per-line CRC and a lock file.

One line per RunRecord: {"record": {...}, "crc": <crc32 of the canonical
record JSON>}. Corrupted lines are skipped with a warning; duplicate
(model, task, dataset, seed, config_hash) keys are rejected on append.
"""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from pathlib import Path

from .domain import RunRecord, canonical_json

logger = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


class DuplicateRecordError(StoreError):
    pass


def _crc(record_json: dict) -> int:
    return zlib.crc32(canonical_json(record_json).encode("utf-8")) & 0xFFFFFFFF


class ResultsStore:
    """Single-writer, multi-reader JSON-lines store."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._keys: set[tuple] | None = None

    # -- reading ------------------------------------------------------------

    def records(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    record_json = obj["record"]
                    if _crc(record_json) != obj["crc"]:
                        raise ValueError("CRC mismatch")
                    out.append(RunRecord.from_json(record_json))
                except (ValueError, KeyError, TypeError) as exc:
                    logger.warning("%s:%d: skipping corrupted line (%s)",
                                   self.path, lineno, exc)
        return out

    def query(self, model_id=None, task_id=None, dataset_id=None, seed=None,
              config_hash=None, status=None) -> list[RunRecord]:
        out = []
        for r in self.records():
            if model_id is not None and r.model_id != model_id:
                continue
            if task_id is not None and r.task_id != task_id:
                continue
            if dataset_id is not None and r.dataset_id != dataset_id:
                continue
            if seed is not None and r.seed != seed:
                continue
            if config_hash is not None and r.config_hash != config_hash:
                continue
            if status is not None and r.status != status:
                continue
            out.append(r)
        return out

    def keys(self) -> set[tuple]:
        if self._keys is None:
            self._keys = {r.key for r in self.records()}
        return self._keys

    # -- writing ------------------------------------------------------------

    def append(self, record: RunRecord) -> None:
        if record.key in self.keys():
            raise DuplicateRecordError(
                f"duplicate record {record.key} already in {self.path}"
            )
        record_json = record.to_json()
        line = json.dumps({"record": record_json, "crc": _crc(record_json)},
                          sort_keys=True)
        with self._lock():
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        self.keys().add(record.key)

    def compact(self) -> int:
        """Rewrite the store keeping only valid lines; returns lines kept."""
        return self.rewrite(self.records())

    def rewrite(self, records: list[RunRecord]) -> int:
        """Atomically replace the store contents (compaction, forced reruns)."""
        tmp = self.path.with_suffix(".tmp")
        with self._lock():
            with tmp.open("w", encoding="utf-8") as fh:
                for r in records:
                    rj = r.to_json()
                    fh.write(json.dumps({"record": rj, "crc": _crc(rj)},
                                        sort_keys=True) + "\n")
            os.replace(tmp, self.path)
        self._keys = None
        return len(records)

    def _lock(self, timeout: float = 30.0):
        return _FileLock(self.path.with_suffix(".lock"), timeout)


class _FileLock:
    """O_EXCL lock file; stale locks older than 5 minutes are broken."""

    def __init__(self, path: Path, timeout: float):
        self.path = path
        self.timeout = timeout

    def __enter__(self):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(fd, str(os.getpid()).encode())
                os.close(fd)
                return self
            except FileExistsError:
                try:
                    age = time.time() - self.path.stat().st_mtime
                    if age > 300:
                        logger.warning("breaking stale lock %s (age %.0fs)",
                                       self.path, age)
                        self.path.unlink(missing_ok=True)
                        continue
                except FileNotFoundError:
                    continue
                if time.monotonic() > deadline:
                    raise StoreError(f"could not acquire lock {self.path}")
                time.sleep(0.05)

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False
