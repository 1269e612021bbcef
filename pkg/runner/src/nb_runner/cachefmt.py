"""Reader for the engine's example-set cache and split-manifest files.

Implemented against PROTOCOL.md (not against the engine package): magic
"NBCH" | u8 version | u32 header length | JSON header | raw little-endian
blocks | trailing CRC-32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"NBCH"
CACHE_VERSION = 1


class CacheFormatError(RuntimeError):
    pass


@dataclass
class CachedExampleSet:
    windows: np.ndarray  # [n, c, t] float32
    target_kind: str  # class | labels | scalar | embedding
    targets: np.ndarray  # class: int64 [n]; labels: bool [n,L]; scalar: f8 [n];
    #                      embedding: f4 [n, d]
    subject_ids: list[str]
    session_ids: list[str]
    concept_ids: list
    split_labels: list[str]
    sfreq: float

    @property
    def n_examples(self) -> int:
        return self.windows.shape[0]

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, l in enumerate(self.split_labels) if l == split],
                        dtype=np.int64)


def read_cache(path: str | Path) -> CachedExampleSet:
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic")
    stored = struct.unpack("<I", raw[-4:])[0]
    if stored != (zlib.crc32(raw[:-4]) & 0xFFFFFFFF):
        raise CacheFormatError(f"{path}: checksum failure")
    if raw[4] != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {raw[4]}")
    hlen = struct.unpack("<I", raw[5:9])[0]
    header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    offset = 9 + hlen
    arrays = {}
    for blk in header["blocks"]:
        dtype = np.dtype(blk["dtype"])
        count = int(np.prod(blk["shape"]))
        nbytes = count * dtype.itemsize
        arrays[blk["name"]] = np.frombuffer(raw[offset:offset + nbytes],
                                            dtype=dtype).reshape(blk["shape"])
        offset += nbytes

    kind = header["target_kind"]
    if kind == "class":
        targets = np.asarray(header["targets"], dtype=np.int64)
    elif kind == "labels":
        targets = np.asarray(header["targets"], dtype=bool)
    elif kind == "scalar":
        targets = np.asarray(header["targets"], dtype=np.float64)
    elif kind == "embedding":
        targets = arrays["embeddings"]
    else:
        raise CacheFormatError(f"unknown target kind {kind!r}")
    return CachedExampleSet(
        windows=arrays["windows"],
        target_kind=kind,
        targets=targets,
        subject_ids=list(header["subject_ids"]),
        session_ids=list(header["session_ids"]),
        concept_ids=list(header["concept_ids"]),
        split_labels=list(header["split_labels"]),
        sfreq=float(header["sfreq"]),
    )


def read_split_manifest(path: str | Path) -> dict[int, str]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("version") != 1:
        raise CacheFormatError(f"{path}: unsupported manifest version")
    return {int(k): v for k, v in obj["labels"].items()}
