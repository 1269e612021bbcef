"""Recordings and example sets: synthetic generation, disk formats, epoching, cache.

On-disk recording format (one directory per dataset):
  <root>/<dataset_id>/<recording_id>.json   sidecar header (ids, sfreq, channels, events)
  <root>/<dataset_id>/<recording_id>.bin    raw little-endian float32, channel-major

Example-set cache (single file): magic "NBCH" | u8 version | u32 header length |
JSON header | payload blocks | u32 CRC-32 over all preceding bytes.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TaskSpec
from .domain import (
    SIGNAL_DTYPE,
    ClassIndex,
    Embedding,
    Event,
    ExampleSet,
    LabelVector,
    ObjectiveKind,
    Recording,
    Scalar,
    Target,
)

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"NBCH"
CACHE_VERSION = 1
RECORDING_FORMAT = "nbrec/v1"


class DataError(RuntimeError):
    """Malformed on-disk data or cache."""


# ---------------------------------------------------------------------------
# Synthetic profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvokedDeflection:
    """Per-class (or per-label) spatial pattern with a Hann pulse at a latency."""

    amplitude: float = 2.0
    latency: float = 0.3
    width: float = 0.25


@dataclass(frozen=True)
class FrequencyTag:
    """One stimulation frequency per class, random phase per event."""

    freqs: tuple[float, ...] = (8.0, 11.0, 14.0, 17.0)
    amplitude: float = 1.0


@dataclass(frozen=True)
class LinearEmbeddingMix:
    """Windows carry (mixing matrix @ embedding) under a smooth time profile."""

    embedding_dim: int = 16
    amplitude: float = 2.0


Effect = EvokedDeflection | FrequencyTag | LinearEmbeddingMix


@dataclass(frozen=True)
class SyntheticProfile:
    name: str
    n_subjects: int
    n_channels: int
    sfreq: float
    n_events_per_subject: int
    objective: ObjectiveKind
    effect: Effect
    class_count: int = 2
    class_names: tuple[str, ...] = ()
    label_prob: float = 0.35  # multilabel activation probability
    scalar_range: tuple[float, float] = (0.5, 2.0)
    n_concepts: int = 0  # retrieval only; 0 means one concept per event slot
    embedding_rank: int | None = None  # latent dimensionality of concept embeddings
    n_sessions_per_subject: int = 1
    event_spacing: float = 2.0
    lead_in: float = 1.0
    stim_duration: float = 1.0
    noise_std: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        for field_name in ("n_subjects", "n_channels", "n_events_per_subject",
                           "n_sessions_per_subject"):
            if getattr(self, field_name) <= 0:
                raise ValueError(f"{field_name} must be positive")
        if self.sfreq <= 0:
            raise ValueError("sfreq must be positive")
        if isinstance(self.effect, FrequencyTag):
            for f in self.effect.freqs:
                if f >= self.sfreq / 2:
                    raise ValueError(f"stimulation frequency {f} Hz >= Nyquist")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def resolved_class_names(self) -> tuple[str, ...]:
        if self.class_names:
            return self.class_names
        return tuple(f"class_{i}" for i in range(self.class_count))


def _hann_pulse(n: int) -> np.ndarray:
    # peak of exactly 1.0 at the middle sample (n odd)
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / (n - 1))


def _class_patterns(profile: SyntheticProfile, count: int) -> np.ndarray:
    """Deterministic per-class spatial patterns, max-abs normalized to 1."""
    rng = np.random.default_rng([profile.rng_seed, 11])
    patterns = rng.standard_normal((count, profile.n_channels))
    patterns /= np.abs(patterns).max(axis=1, keepdims=True)
    return patterns


def _mixing_matrix(profile: SyntheticProfile) -> np.ndarray:
    assert isinstance(profile.effect, LinearEmbeddingMix)
    d = profile.effect.embedding_dim
    rng = np.random.default_rng([profile.rng_seed, 12])
    return rng.standard_normal((profile.n_channels, d)) / np.sqrt(d)


def synthetic_concept_embeddings(profile: SyntheticProfile) -> dict[str, np.ndarray]:
    """Unit-norm embedding per concept, deterministic from the profile seed.

    With `embedding_rank` set, embeddings span a low-dimensional latent
    subspace of the full embedding space (real stimulus-encoder embeddings
    have rapidly decaying spectra; this also keeps the concepts recoverable
    through a channel-limited mixing matrix).
    """
    if profile.objective is not ObjectiveKind.RETRIEVAL:
        return {}
    assert isinstance(profile.effect, LinearEmbeddingMix)
    n = profile.n_concepts or profile.n_events_per_subject
    d = profile.effect.embedding_dim
    rng = np.random.default_rng([profile.rng_seed, 13])
    if profile.embedding_rank is not None and profile.embedding_rank < d:
        basis, _ = np.linalg.qr(rng.standard_normal((d, profile.embedding_rank)))
        vecs = rng.standard_normal((n, profile.embedding_rank)) @ basis.T
    else:
        vecs = rng.standard_normal((n, d))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return {f"concept_{i:04d}": vecs[i].astype(SIGNAL_DTYPE) for i in range(n)}


def generate_synthetic(profile: SyntheticProfile) -> list[Recording]:
    """Produce one recording per (subject, session), deterministic given rng_seed."""
    recordings = []
    embeddings = synthetic_concept_embeddings(profile)
    concept_ids = sorted(embeddings)
    n_per_session = -(-profile.n_events_per_subject // profile.n_sessions_per_subject)
    for subj in range(profile.n_subjects):
        remaining = profile.n_events_per_subject
        for sess in range(profile.n_sessions_per_subject):
            n_events = min(n_per_session, remaining)
            remaining -= n_events
            if n_events <= 0:
                continue
            rng = np.random.default_rng([profile.rng_seed, 1, subj, sess])
            rec = _generate_recording(profile, subj, sess, n_events, rng, concept_ids,
                                      embeddings)
            recordings.append(rec)
    return recordings


def _generate_recording(profile, subj, sess, n_events, rng, concept_ids, embeddings):
    sfreq = profile.sfreq
    spacing = profile.event_spacing
    total_s = profile.lead_in + n_events * spacing + spacing
    n_samples = int(round(total_s * sfreq))
    c = profile.n_channels
    if profile.noise_std > 0:
        data = rng.normal(0.0, profile.noise_std, size=(c, n_samples))
    else:
        data = np.zeros((c, n_samples))

    onsets = profile.lead_in + spacing * np.arange(n_events)
    effect = profile.effect
    events: list[Event] = []

    if isinstance(effect, EvokedDeflection) and profile.objective is ObjectiveKind.MULTILABEL:
        names = profile.resolved_class_names
        patterns = _class_patterns(profile, len(names))
        pulse_len = int(round(effect.width * sfreq)) | 1
        pulse = _hann_pulse(pulse_len)
        for k, onset in enumerate(onsets):
            active = rng.random(len(names)) < profile.label_prob
            desc = "+".join(n for n, a in zip(names, active) if a)
            for li, is_on in enumerate(active):
                if is_on:
                    center = int(round((onset + effect.latency + 0.04 * li) * sfreq))
                    _add_pulse(data, patterns[li], pulse, center, effect.amplitude)
            events.append(Event(onset=float(onset), event_type="Stimulus", description=desc))
    elif isinstance(effect, EvokedDeflection):
        names = profile.resolved_class_names
        patterns = _class_patterns(profile, len(names))
        pulse_len = int(round(effect.width * sfreq)) | 1
        pulse = _hann_pulse(pulse_len)
        classes = np.tile(np.arange(len(names)), -(-n_events // len(names)))[:n_events]
        classes = rng.permutation(classes)
        for k, onset in enumerate(onsets):
            ci = int(classes[k])
            center = int(round((onset + effect.latency) * sfreq))
            _add_pulse(data, patterns[ci], pulse, center, effect.amplitude)
            events.append(Event(onset=float(onset), event_type="Stimulus",
                                description=names[ci]))
    elif isinstance(effect, FrequencyTag):
        names = profile.resolved_class_names
        n_classes = len(effect.freqs)
        patterns = np.abs(_class_patterns(profile, n_classes))  # coherent gains
        stim_len = int(round(profile.stim_duration * sfreq))
        t = np.arange(stim_len) / sfreq
        classes = np.tile(np.arange(n_classes), -(-n_events // n_classes))[:n_events]
        classes = rng.permutation(classes)
        for k, onset in enumerate(onsets):
            ci = int(classes[k])
            phase = rng.uniform(0.0, 2 * np.pi)
            wave = effect.amplitude * np.sin(2 * np.pi * effect.freqs[ci] * t + phase)
            i0 = int(round(onset * sfreq))
            data[:, i0:i0 + stim_len] += np.outer(patterns[ci], wave)
            events.append(Event(onset=float(onset), event_type="Stimulus",
                                description=names[ci]))
    elif isinstance(effect, LinearEmbeddingMix):
        mixing = _mixing_matrix(profile)
        stim_len = int(round(profile.stim_duration * sfreq))
        envelope = effect.amplitude * _hann_pulse(stim_len | 1)[:stim_len]
        if profile.objective is ObjectiveKind.RETRIEVAL:
            order = rng.permutation(len(concept_ids))
            for k, onset in enumerate(onsets):
                cid = concept_ids[order[k % len(concept_ids)]]
                z = embeddings[cid].astype(np.float64)
                i0 = int(round(onset * sfreq))
                data[:, i0:i0 + stim_len] += np.outer(mixing @ z, envelope)
                events.append(Event(onset=float(onset), event_type="Stimulus",
                                    description=cid, concept_id=cid))
        else:  # scalar regression: one-dimensional embedding scales the pattern
            lo, hi = profile.scalar_range
            for k, onset in enumerate(onsets):
                y = float(rng.uniform(lo, hi))
                z = np.full(effect.embedding_dim, y)
                i0 = int(round(onset * sfreq))
                data[:, i0:i0 + stim_len] += np.outer(mixing @ z, envelope)
                events.append(Event(onset=float(onset), event_type="Stimulus",
                                    description=repr(y)))
    else:
        raise TypeError(f"unknown effect {effect!r}")

    return Recording(
        recording_id=f"{profile.name}_s{subj:02d}r{sess:02d}",
        subject_id=f"subj_{subj:02d}",
        session_id=f"sess_{sess:02d}",
        sfreq=sfreq,
        channels=tuple(f"ch_{i:02d}" for i in range(c)),
        data=data.astype(SIGNAL_DTYPE),
        events=tuple(events),
    )


def _add_pulse(data: np.ndarray, pattern: np.ndarray, pulse: np.ndarray,
               center: int, amplitude: float):
    half = (len(pulse) - 1) // 2
    i0, i1 = center - half, center + half + 1
    lo, hi = max(i0, 0), min(i1, data.shape[1])
    data[:, lo:hi] += amplitude * np.outer(pattern, pulse[lo - i0:len(pulse) - (i1 - hi)])


# Profiles backing the built-in task registry. Sized for quick desk-scale runs.
SYNTHETIC_PROFILES: dict[str, SyntheticProfile] = {}


def _register(profile: SyntheticProfile):
    SYNTHETIC_PROFILES[profile.name] = profile


_register(SyntheticProfile(
    name="evoked_a", n_subjects=8, n_channels=16, sfreq=120.0, n_events_per_subject=48,
    objective=ObjectiveKind.BINARY, class_count=2, class_names=("standard", "target"),
    effect=EvokedDeflection(amplitude=2.5, latency=0.3, width=0.25),
    event_spacing=2.0, noise_std=1.0, rng_seed=101,
))
_register(SyntheticProfile(
    name="audiovisual_a", n_subjects=1, n_channels=16, sfreq=120.0,
    n_events_per_subject=288, objective=ObjectiveKind.MULTICLASS, class_count=4,
    class_names=("auditory_left", "auditory_right", "visual_left", "visual_right"),
    effect=EvokedDeflection(amplitude=3.0, latency=0.3, width=0.25),
    event_spacing=2.0, noise_std=1.0, rng_seed=102,
))
_register(SyntheticProfile(
    name="freqtag_a", n_subjects=6, n_channels=12, sfreq=120.0, n_events_per_subject=48,
    objective=ObjectiveKind.MULTICLASS, class_count=4,
    effect=FrequencyTag(freqs=(8.0, 11.0, 14.0, 17.0), amplitude=1.2),
    event_spacing=3.0, stim_duration=2.0, noise_std=1.0, rng_seed=103,
))
_register(SyntheticProfile(
    name="freqtag_b", n_subjects=5, n_channels=12, sfreq=120.0, n_events_per_subject=40,
    objective=ObjectiveKind.MULTICLASS, class_count=4,
    effect=FrequencyTag(freqs=(8.0, 11.0, 14.0, 17.0), amplitude=1.0),
    event_spacing=3.0, stim_duration=2.0, noise_std=1.0, rng_seed=104,
))
_register(SyntheticProfile(
    name="artifact_a", n_subjects=6, n_channels=12, sfreq=120.0, n_events_per_subject=60,
    objective=ObjectiveKind.MULTILABEL, class_count=5,
    class_names=("blink", "chew", "electrode", "movement", "muscle"),
    effect=EvokedDeflection(amplitude=2.0, latency=0.25, width=0.3),
    event_spacing=2.0, noise_std=1.0, rng_seed=105,
))
_register(SyntheticProfile(
    name="reaction_a", n_subjects=6, n_channels=12, sfreq=120.0, n_events_per_subject=60,
    objective=ObjectiveKind.REGRESSION,
    effect=LinearEmbeddingMix(embedding_dim=1, amplitude=2.0),
    scalar_range=(0.5, 2.0), event_spacing=2.0, stim_duration=1.0, noise_std=1.0,
    rng_seed=106,
))
_register(SyntheticProfile(
    name="image_a", n_subjects=2, n_channels=24, sfreq=120.0, n_events_per_subject=500,
    objective=ObjectiveKind.RETRIEVAL, n_concepts=500, embedding_rank=16,
    effect=LinearEmbeddingMix(embedding_dim=1536, amplitude=12.0),
    event_spacing=1.0, stim_duration=0.25, noise_std=0.5, rng_seed=107,
))


def get_profile(name: str) -> SyntheticProfile:
    if name not in SYNTHETIC_PROFILES:
        raise DataError(f"unknown synthetic profile {name!r}; "
                        f"known: {sorted(SYNTHETIC_PROFILES)}")
    return SYNTHETIC_PROFILES[name]


# ---------------------------------------------------------------------------
# Recording disk format
# ---------------------------------------------------------------------------

def save_recording(root: str | Path, recording: Recording) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    header = {
        "format": RECORDING_FORMAT,
        "recording_id": recording.recording_id,
        "subject_id": recording.subject_id,
        "session_id": recording.session_id,
        "sfreq": recording.sfreq,
        "channels": list(recording.channels),
        "dtype": "<f4",
        "n_samples": recording.n_samples,
        "events": [
            {"onset": e.onset, "event_type": e.event_type,
             "description": e.description, "concept_id": e.concept_id}
            for e in recording.events
        ],
    }
    _atomic_write(root / f"{recording.recording_id}.json",
                  json.dumps(header, sort_keys=True).encode("utf-8"))
    _atomic_write(root / f"{recording.recording_id}.bin",
                  np.ascontiguousarray(recording.data, dtype="<f4").tobytes())


def load_recording(root: str | Path, recording_id: str) -> Recording:
    """Load a recording from `<root>/<recording_id>.{json,bin}`, validating fully."""
    root = Path(root)
    header_path = root / f"{recording_id}.json"
    payload_path = root / f"{recording_id}.bin"
    if not header_path.exists():
        raise DataError(f"missing header file {header_path}")
    if not payload_path.exists():
        raise DataError(f"missing payload file {payload_path}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    if header.get("format") != RECORDING_FORMAT:
        raise DataError(f"unsupported recording format {header.get('format')!r}")
    sfreq = float(header["sfreq"])
    if sfreq <= 0:
        raise DataError(f"invalid sfreq {sfreq} in {header_path}")
    channels = tuple(header["channels"])
    n_samples = int(header["n_samples"])
    payload = payload_path.read_bytes()
    expected = len(channels) * n_samples * 4
    if len(payload) != expected:
        raise DataError(
            f"payload length mismatch for {recording_id}: {len(payload)} bytes, "
            f"expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(len(channels), n_samples)
    if not np.isfinite(data).all():
        raise DataError(f"recording {recording_id} contains non-finite samples")
    events = tuple(
        Event(onset=float(e["onset"]), event_type=e["event_type"],
              description=e.get("description", ""), concept_id=e.get("concept_id"))
        for e in header.get("events", [])
    )
    return Recording(
        recording_id=header["recording_id"],
        subject_id=header["subject_id"],
        session_id=header["session_id"],
        sfreq=sfreq,
        channels=channels,
        data=data,
        events=events,
    )


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Epoching
# ---------------------------------------------------------------------------

def select_epochs(recording: Recording, trigger_event_type: str, start: float,
                  duration: float) -> tuple[list[tuple[Event, int]], int]:
    """Matching events with their window start sample; second item counts drops."""
    sfreq = recording.sfreq
    n_times = int(round(duration * sfreq))
    kept: list[tuple[Event, int]] = []
    dropped = 0
    for ev in recording.events:
        if ev.event_type != trigger_event_type:
            continue
        i0 = int(round((ev.onset + start) * sfreq))
        if i0 < 0 or i0 + n_times > recording.n_samples:
            dropped += 1
            continue
        kept.append((ev, i0))
    return kept, dropped


def epoch(recording: Recording, spec: TaskSpec,
          aux_embeddings: dict[str, np.ndarray] | None = None) -> ExampleSet:
    """Cut one window per matching event of a single recording (unsplit)."""
    return epoch_all([recording], spec, aux_embeddings=aux_embeddings)


def epoch_all(recordings: list[Recording], spec: TaskSpec,
              aux_embeddings: dict[str, np.ndarray] | None = None) -> ExampleSet:
    """Epoch a list of recordings into one unsplit ExampleSet.

    Class vocabularies are built across all recordings so label encoding is
    consistent dataset-wide. Raises on zero matching events.
    """
    n_times = int(round(spec.duration * recordings[0].sfreq))
    windows, events, subjects, sessions = [], [], [], []
    total_dropped = 0
    for rec in recordings:
        kept, dropped = select_epochs(rec, spec.trigger_event_type, spec.start,
                                      spec.duration)
        total_dropped += dropped
        for ev, i0 in kept:
            windows.append(rec.data[:, i0:i0 + n_times])
            events.append(ev)
            subjects.append(rec.subject_id)
            sessions.append(rec.session_id)
    if total_dropped:
        logger.warning("dropped %d out-of-bounds epoch(s)", total_dropped)
    if not windows:
        raise DataError(
            f"no events of type {spec.trigger_event_type!r} produced valid windows"
        )
    targets = _encode_targets(events, spec, aux_embeddings)
    return ExampleSet(
        windows=np.stack(windows),
        targets=tuple(targets),
        subject_ids=tuple(subjects),
        session_ids=tuple(sessions),
        concept_ids=tuple(ev.concept_id for ev in events),
        split_labels=("",) * len(events),
        sfreq=recordings[0].sfreq,
        window_start=spec.start,
        duration=spec.duration,
    )


def _encode_targets(events: list[Event], spec: TaskSpec,
                    aux_embeddings: dict[str, np.ndarray] | None) -> list[Target]:
    codec = spec.target_codec
    if codec.name == "LabelEncoder":
        classes = list(codec.classes) or sorted({ev.description for ev in events})
        _check_n_outputs(spec, len(classes), "classes")
        index = {c: i for i, c in enumerate(classes)}
        try:
            return [ClassIndex(index[ev.description]) for ev in events]
        except KeyError as exc:
            raise DataError(f"event class {exc.args[0]!r} not in declared classes") from exc
    if codec.name == "MultiHotEncoder":
        if codec.classes:
            classes = list(codec.classes)
        else:
            classes = sorted({tok for ev in events for tok in ev.description.split("+") if tok})
        _check_n_outputs(spec, len(classes), "labels")
        index = {c: i for i, c in enumerate(classes)}
        out = []
        for ev in events:
            bits = [False] * len(classes)
            for tok in ev.description.split("+"):
                if not tok:
                    continue
                if tok not in index:
                    raise DataError(f"unknown label {tok!r} in event description")
                bits[index[tok]] = True
            out.append(LabelVector(tuple(bits)))
        return out
    if codec.name == "ScalarField":
        try:
            return [Scalar(float(ev.description)) for ev in events]
        except ValueError as exc:
            raise DataError(f"non-numeric scalar target: {exc}") from exc
    if codec.name == "ConceptEmbedding":
        if aux_embeddings is None:
            raise DataError("ConceptEmbedding codec requires a concept embedding table")
        out = []
        for ev in events:
            if ev.concept_id is None or ev.concept_id not in aux_embeddings:
                raise DataError(f"event at {ev.onset}s has no embedding "
                                f"(concept_id={ev.concept_id!r})")
            vec = aux_embeddings[ev.concept_id]
            _check_n_outputs(spec, len(vec), "embedding dimensions")
            out.append(Embedding(vec))
        return out
    raise DataError(f"unhandled target codec {codec.name!r}")


def _check_n_outputs(spec: TaskSpec, discovered: int, what: str):
    if spec.n_outputs is not None and spec.n_outputs != discovered:
        raise DataError(
            f"task {spec.task_id!r} declares n_outputs={spec.n_outputs} but the data "
            f"yields {discovered} {what}"
        )


# ---------------------------------------------------------------------------
# Example-set cache
# ---------------------------------------------------------------------------

def write_cache(es: ExampleSet, path: str | Path) -> None:
    """Serialize an ExampleSet to a single checksummed cache file (atomic)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    blocks: list[tuple[str, np.ndarray]] = [("windows", np.ascontiguousarray(es.windows, dtype="<f4"))]
    target_kind, targets_json = _targets_header(es.targets)
    if target_kind == "embedding":
        emb = np.stack([t.values for t in es.targets]).astype("<f4")
        blocks.append(("embeddings", np.ascontiguousarray(emb)))

    header = {
        "sfreq": es.sfreq,
        "window_start": es.window_start,
        "duration": es.duration,
        "subject_ids": list(es.subject_ids),
        "session_ids": list(es.session_ids),
        "concept_ids": list(es.concept_ids),
        "split_labels": list(es.split_labels),
        "target_kind": target_kind,
        "targets": targets_json,
        "blocks": [{"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
                   for name, arr in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += CACHE_MAGIC
    body += struct.pack("<B", CACHE_VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for _, arr in blocks:
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    _atomic_write(path, bytes(body))


def read_cache(path: str | Path) -> ExampleSet:
    """Read a cache file back; bit-identical to what was written."""
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not a cache file (bad magic)")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise DataError(f"{path}: checksum failure (stored {stored_crc:#010x}, "
                        f"computed {actual_crc:#010x})")
    version = raw[4]
    if version != CACHE_VERSION:
        raise DataError(f"{path}: cache format version {version}, engine supports "
                        f"{CACHE_VERSION}")
    header_len = struct.unpack("<I", raw[5:9])[0]
    header = json.loads(raw[9:9 + header_len].decode("utf-8"))
    offset = 9 + header_len
    arrays = {}
    for blk in header["blocks"]:
        dtype = np.dtype(blk["dtype"])
        count = int(np.prod(blk["shape"]))
        nbytes = count * dtype.itemsize
        arrays[blk["name"]] = np.frombuffer(raw[offset:offset + nbytes], dtype=dtype
                                            ).reshape(blk["shape"])
        offset += nbytes
    if offset != len(raw) - 4:
        raise DataError(f"{path}: payload length mismatch")
    targets = _targets_from_header(header, arrays)
    return ExampleSet(
        windows=arrays["windows"],
        targets=tuple(targets),
        subject_ids=tuple(header["subject_ids"]),
        session_ids=tuple(header["session_ids"]),
        concept_ids=tuple(header["concept_ids"]),
        split_labels=tuple(header["split_labels"]),
        sfreq=header["sfreq"],
        window_start=header["window_start"],
        duration=header["duration"],
    )


def _targets_header(targets: tuple[Target, ...]):
    first = targets[0]
    if isinstance(first, ClassIndex):
        return "class", [t.value for t in targets]
    if isinstance(first, LabelVector):
        return "labels", [[bool(b) for b in t.values] for t in targets]
    if isinstance(first, Scalar):
        return "scalar", [t.value for t in targets]
    if isinstance(first, Embedding):
        return "embedding", None
    raise TypeError(f"unknown target type {type(first)}")


def _targets_from_header(header, arrays):
    kind = header["target_kind"]
    if kind == "class":
        return [ClassIndex(int(v)) for v in header["targets"]]
    if kind == "labels":
        return [LabelVector(tuple(bool(b) for b in row)) for row in header["targets"]]
    if kind == "scalar":
        return [Scalar(float(v)) for v in header["targets"]]
    if kind == "embedding":
        emb = arrays["embeddings"]
        return [Embedding(emb[i]) for i in range(emb.shape[0])]
    raise DataError(f"unknown target kind {kind!r} in cache header")
