"""Recording-level preprocessing and per-epoch baseline correction.

Stage order is fixed: bandpass -> notch -> resample -> robust_scale -> clamp,
then (after epoching) baseline_correct. Filters are 4th-order Butterworth IIR
applied forward-backward (zero phase); notches are Q=30 IIR sections; the
resampler is polyphase windowed-sinc (Kaiser beta=8, cutoff 0.9x new Nyquist).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

from .domain import SIGNAL_DTYPE, ExampleSet, Recording

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocSpec:
    target_sfreq: float = 120.0
    band: tuple[float, float] = (0.1, 75.0)
    notch_freqs: tuple[float, ...] = (50.0, 60.0)
    clamp_bound: float = 20.0
    do_bandpass: bool = True
    do_notch: bool = True
    do_resample: bool = True
    do_scale: bool = True
    do_clamp: bool = True

    def __post_init__(self):
        low, high = self.band
        if not 0 < low < high:
            raise ValueError(f"band must satisfy 0 < low < high, got {self.band}")
        if self.clamp_bound <= 0:
            raise ValueError("clamp bound must be positive")


def bandpass(recording: Recording, low: float, high: float) -> Recording:
    """Zero-phase Butterworth bandpass between `low` and `high` Hz."""
    nyq = recording.sfreq / 2.0
    if not 0 < low < high < nyq:
        raise ValueError(
            f"invalid band [{low}, {high}] Hz for sfreq {recording.sfreq} (Nyquist {nyq})"
        )
    sos = signal.butter(4, [low, high], btype="bandpass", output="sos",
                        fs=recording.sfreq)
    filtered = signal.sosfiltfilt(sos, recording.data.astype(np.float64), axis=1)
    return recording.with_data(filtered.astype(SIGNAL_DTYPE))


def notch(recording: Recording, freqs) -> Recording:
    """Zero-phase notch filters (Q=30). Frequencies at/above Nyquist are skipped."""
    nyq = recording.sfreq / 2.0
    sections = []
    for f in freqs:
        if f >= nyq:
            logger.info("skipping notch at %.1f Hz (>= Nyquist %.1f Hz)", f, nyq)
            continue
        b, a = signal.iirnotch(f, Q=30.0, fs=recording.sfreq)
        sections.append(signal.tf2sos(b, a))
    if not sections:
        return recording
    sos = np.vstack(sections)
    filtered = signal.sosfiltfilt(sos, recording.data.astype(np.float64), axis=1)
    return recording.with_data(filtered.astype(SIGNAL_DTYPE))


def harmonics_below(base_freqs, nyquist: float) -> tuple[float, ...]:
    """Each base frequency and its integer harmonics strictly below `nyquist`."""
    out = []
    for f in base_freqs:
        k = 1
        while k * f < nyquist:
            out.append(k * f)
            k += 1
    return tuple(sorted(set(out)))


def _resample_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    # 32 taps per polyphase branch keeps the transition band a few Hz wide, so
    # the 0.9x-Nyquist cutoff leaves the passband flat well past 0.8x Nyquist
    half_len = 32 * max_rate
    # cutoff at 0.9x the target Nyquist, expressed at the upsampled rate;
    # resample_poly applies the gain `up` itself
    cutoff = 0.9 / max_rate
    return signal.firwin(2 * half_len + 1, cutoff, window=("kaiser", 8.0))


def resample(recording: Recording, target_sfreq: float) -> Recording:
    """Polyphase resampling to `target_sfreq`; event onsets stay in seconds."""
    if target_sfreq <= 0:
        raise ValueError("target_sfreq must be positive")
    if target_sfreq == recording.sfreq:
        return recording
    frac = (Fraction(str(float(target_sfreq))) / Fraction(str(float(recording.sfreq)))
            ).limit_denominator(10000)
    up, down = frac.numerator, frac.denominator
    h = _resample_filter(up, down)
    resampled = signal.resample_poly(recording.data.astype(np.float64), up, down,
                                     axis=1, window=h)
    return recording.with_data(resampled.astype(SIGNAL_DTYPE), sfreq=float(target_sfreq))


def robust_scale(recording: Recording) -> Recording:
    """Per-channel (x - median) / IQR over the full recording.

    Channels with zero IQR are divided by 1 and flagged in the log.
    """
    data = recording.data.astype(np.float64)
    med = np.median(data, axis=1, keepdims=True)
    q75, q25 = np.percentile(data, [75, 25], axis=1, keepdims=True)
    iqr = q75 - q25
    degenerate = iqr[:, 0] == 0
    if degenerate.any():
        names = [recording.channels[i] for i in np.flatnonzero(degenerate)]
        logger.warning("zero IQR on channel(s) %s; dividing by 1", names)
        iqr[degenerate] = 1.0
    return recording.with_data(((data - med) / iqr).astype(SIGNAL_DTYPE))


def clamp(recording: Recording, bound: float = 20.0) -> Recording:
    """Limit every sample to [-bound, bound]."""
    if bound <= 0:
        raise ValueError("clamp bound must be positive")
    return recording.with_data(np.clip(recording.data, -bound, bound))


def preprocess(recording: Recording, spec: PreprocSpec = PreprocSpec()) -> Recording:
    """Apply the full recording-level pipeline in the fixed stage order."""
    stages = []
    rec = recording
    if spec.do_bandpass:
        low, high = spec.band
        nyq = rec.sfreq / 2.0
        if high >= nyq:
            clipped = 0.99 * nyq
            logger.info("band edge %.1f Hz >= Nyquist %.1f Hz; clipping to %.2f Hz",
                        high, nyq, clipped)
            high = clipped
        rec = bandpass(rec, low, high)
        stages.append(f"bandpass[{low},{high:.4g}]")
    if spec.do_notch:
        freqs = harmonics_below(spec.notch_freqs, rec.sfreq / 2.0)
        rec = notch(rec, freqs)
        stages.append(f"notch{list(freqs)}")
    if spec.do_resample:
        rec = resample(rec, spec.target_sfreq)
        stages.append(f"resample[{spec.target_sfreq}]")
    if spec.do_scale:
        rec = robust_scale(rec)
        stages.append("robust_scale")
    if spec.do_clamp:
        rec = clamp(rec, spec.clamp_bound)
        stages.append(f"clamp[{spec.clamp_bound}]")
    logger.info("preprocessed %s: %s", recording.recording_id, " -> ".join(stages))
    return rec


def baseline_correct(es: ExampleSet, interval: tuple[float, float]) -> ExampleSet:
    """Subtract the per-example, per-channel mean over `interval` (seconds
    relative to epoch start)."""
    t0, t1 = interval
    i0 = int(round(t0 * es.sfreq))
    i1 = int(round(t1 * es.sfreq))
    if not 0 <= i0 < i1 <= es.n_times:
        raise ValueError(
            f"baseline interval [{t0}, {t1}] s maps to samples [{i0}, {i1}) outside "
            f"the {es.n_times}-sample window"
        )
    win = es.windows.astype(np.float64)
    win -= win[:, :, i0:i1].mean(axis=2, keepdims=True)
    return es.with_windows(win.astype(SIGNAL_DTYPE))
