import logging
import math

import numpy as np
import pytest

from decodebench import dsp
from decodebench.domain import Recording
from tests.conftest import make_example_set


def _recording(data, sfreq=500.0):
    data = np.atleast_2d(np.asarray(data, dtype=np.float32))
    channels = tuple(f"c{i}" for i in range(data.shape[0]))
    return Recording("r", "s", "e", sfreq, channels, data)


def _impulse_response_gain(filter_fn, sfreq, n=2 ** 17):
    imp = np.zeros((1, n), dtype=np.float32)
    imp[0, n // 2] = 1.0
    out = filter_fn(_recording(imp, sfreq))
    spectrum = np.abs(np.fft.rfft(out.data[0].astype(np.float64)))
    freqs = np.fft.rfftfreq(n, 1.0 / sfreq)

    def gain(f):
        return spectrum[np.argmin(np.abs(freqs - f))]

    return gain


def _db(x):
    return 20.0 * math.log10(max(x, 1e-30))


class TestBandpass:
    def test_stopband_and_passband_spec(self):
        low, high, sfreq = 0.1, 75.0, 500.0
        gain = _impulse_response_gain(lambda r: dsp.bandpass(r, low, high), sfreq)
        assert _db(gain(low / 4)) <= -20.0
        assert _db(gain(min(2 * high, 0.99 * sfreq / 2))) <= -20.0
        for f in np.linspace(2 * low, 0.8 * high, 7):
            assert abs(_db(gain(f))) <= 3.0

    def test_inband_sinusoid_preserved(self):
        sfreq = 500.0
        t = np.arange(int(8 * sfreq)) / sfreq
        rec = _recording(np.sin(2 * np.pi * 30.0 * t), sfreq)
        out = dsp.bandpass(rec, 0.1, 75.0)
        ratio = (np.abs(np.fft.rfft(out.data[0].astype(np.float64))).max()
                 / np.abs(np.fft.rfft(rec.data[0].astype(np.float64))).max())
        assert abs(_db(ratio)) <= 3.0

    def test_slow_drift_attenuated(self):
        gain = _impulse_response_gain(lambda r: dsp.bandpass(r, 0.1, 75.0), 500.0)
        assert _db(gain(0.01)) <= -20.0

    def test_inverted_band_rejected(self):
        rec = _recording(np.zeros(100))
        with pytest.raises(ValueError, match="invalid band"):
            dsp.bandpass(rec, 75.0, 0.1)


class TestNotch:
    def test_attenuation_at_notch_frequencies(self):
        gain = _impulse_response_gain(lambda r: dsp.notch(r, [50.0, 60.0]), 500.0)
        assert _db(gain(50.0)) <= -30.0
        assert _db(gain(60.0)) <= -30.0

    def test_pure_50hz_reduced_30db(self):
        sfreq = 500.0
        t = np.arange(int(8 * sfreq)) / sfreq
        rec = _recording(np.sin(2 * np.pi * 50.0 * t), sfreq)
        out = dsp.notch(rec, [50.0])
        # compare amplitude at the 50 Hz bin
        n = rec.n_samples
        bin50 = int(round(50.0 * n / sfreq))
        before = np.abs(np.fft.rfft(rec.data[0].astype(np.float64)))[bin50]
        after = np.abs(np.fft.rfft(out.data[0].astype(np.float64)))[bin50]
        assert after <= before / 31.6

    def test_neighbours_within_1db(self):
        gain = _impulse_response_gain(lambda r: dsp.notch(r, [50.0]), 500.0)
        assert abs(_db(gain(45.0))) <= 1.0
        assert abs(_db(gain(55.0))) <= 1.0

    def test_above_nyquist_skipped_and_logged(self, caplog):
        rec = _recording(np.random.default_rng(0).normal(size=400), sfreq=120.0)
        with caplog.at_level(logging.INFO, logger="decodebench.dsp"):
            out = dsp.notch(rec, [100.0])
        assert out is rec
        assert any("skipping notch" in m for m in caplog.messages)

    def test_harmonics_enumeration(self):
        freqs = dsp.harmonics_below((50.0, 60.0), 250.0)
        assert freqs == (50.0, 60.0, 100.0, 120.0, 150.0, 180.0, 200.0, 240.0)


class TestResample:
    def test_sinusoid_amplitude_within_1pct(self):
        sfreq = 500.0
        t = np.arange(int(10 * sfreq)) / sfreq
        rec = _recording(np.sin(2 * np.pi * 10.0 * t), sfreq)
        out = dsp.resample(rec, 120.0)
        x = out.data[0].astype(np.float64)
        w = np.hanning(len(x))
        amp = 2 * np.abs(np.fft.rfft(x * w)).max() / w.sum()
        assert abs(amp - 1.0) < 0.01

    def test_identity_resample_bit_identical(self):
        rec = _recording(np.random.default_rng(0).normal(size=1000), sfreq=120.0)
        out = dsp.resample(rec, 120.0)
        assert out is rec

    def test_length_arithmetic(self):
        rec = _recording(np.zeros(500), sfreq=500.0)
        out = dsp.resample(rec, 120.0)
        assert abs(out.n_samples - 120) <= 1
        assert out.sfreq == 120.0

    def test_event_onsets_unchanged(self):
        data = np.random.default_rng(0).normal(size=(1, 5000)).astype(np.float32)
        from decodebench.domain import Event

        rec = Recording("r", "s", "e", 500.0, ("a",), data,
                        events=(Event(2.0, "Stimulus", "x"),))
        out = dsp.resample(rec, 120.0)
        assert out.events[0].onset == 2.0


class TestRobustScale:
    def test_tiled_quantiles(self):
        data = np.tile(np.array([0, 1, 2, 3, 4], dtype=np.float32), 100)
        out = dsp.robust_scale(_recording(data))
        scaled = out.data[0].astype(np.float64)
        assert np.isclose(np.median(scaled), 0.0)
        # original median 2, IQR 2 -> value 4 maps to (4-2)/2 = 1
        assert np.isclose(scaled.max(), 1.0)
        assert np.isclose(scaled.min(), -1.0)

    def test_constant_channel_flagged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="decodebench.dsp"):
            out = dsp.robust_scale(_recording(np.full(100, 3.0)))
        assert np.all(out.data == 0.0)
        assert any("zero IQR" in m for m in caplog.messages)

    def test_idempotent_statistics(self):
        rng = np.random.default_rng(0)
        rec = _recording(rng.normal(2.0, 5.0, size=2000))
        once = dsp.robust_scale(rec)
        twice = dsp.robust_scale(once)
        x = once.data[0].astype(np.float64)
        assert abs(np.median(x)) < 1e-6
        q75, q25 = np.percentile(x, [75, 25])
        assert abs((q75 - q25) - 1.0) < 1e-6
        assert np.allclose(twice.data, once.data, atol=1e-5)


class TestClamp:
    def test_clamps_both_sides(self):
        out = dsp.clamp(_recording(np.array([25.0, -25.0, 3.0])), 20.0)
        assert out.data[0].tolist() == [20.0, -20.0, 3.0]

    def test_identity_within_range(self):
        rec = _recording(np.array([1.0, -2.0]))
        assert np.array_equal(dsp.clamp(rec, 20.0).data, rec.data)

    def test_invalid_bound(self):
        with pytest.raises(ValueError, match="positive"):
            dsp.clamp(_recording(np.zeros(4)), 0.0)


class TestBaselineCorrect:
    def test_constant_window_zeroed(self):
        es = make_example_set(n=3, n_channels=2, n_times=24, sfreq=120.0)
        es = es.with_windows(np.full_like(es.windows, 7.0))
        out = dsp.baseline_correct(es, (0.0, 0.2))
        assert np.allclose(out.windows, 0.0, atol=1e-6)

    def test_sine_recovered(self):
        sfreq = 120.0
        t = np.arange(120) / sfreq
        sine = np.sin(2 * np.pi * 10.0 * t)  # integer cycles over [0, 0.2]
        windows = (5.0 + sine)[None, None, :].astype(np.float32)
        es = make_example_set(n=1, n_channels=1, n_times=120, sfreq=sfreq)
        es = es.with_windows(windows)
        out = dsp.baseline_correct(es, (0.0, 0.2))
        assert np.allclose(out.windows[0, 0], sine, atol=1e-5)

    def test_interval_outside_window(self):
        es = make_example_set(n=2, n_times=24, sfreq=120.0)
        with pytest.raises(ValueError, match="outside"):
            dsp.baseline_correct(es, (0.0, 5.0))

    def test_empty_interval(self):
        es = make_example_set(n=2, n_times=24, sfreq=120.0)
        with pytest.raises(ValueError):
            dsp.baseline_correct(es, (0.1, 0.1))


class TestPipeline:
    def test_filter_stages_linear(self):
        sfreq = 500.0
        rng = np.random.default_rng(0)
        x = rng.normal(size=4000)
        y = rng.normal(size=4000)
        a, b = 1.7, -0.6

        def stages(v):
            rec = _recording(v, sfreq)
            rec = dsp.bandpass(rec, 0.1, 75.0)
            rec = dsp.notch(rec, [50.0, 60.0])
            rec = dsp.resample(rec, 120.0)
            return rec.data[0].astype(np.float64)

        lhs = stages(a * x + b * y)
        rhs = a * stages(x) + b * stages(y)
        assert np.abs(lhs - rhs).max() < 1e-5

    def test_determinism(self):
        rec = _recording(np.random.default_rng(5).normal(size=(3, 4000)), 500.0)
        out1 = dsp.preprocess(rec)
        out2 = dsp.preprocess(rec)
        assert np.array_equal(out1.data, out2.data)

    def test_stage_order_logged(self, caplog):
        rec = _recording(np.random.default_rng(5).normal(size=(2, 4000)), 500.0)
        with caplog.at_level(logging.INFO, logger="decodebench.dsp"):
            dsp.preprocess(rec)
        joined = " ".join(caplog.messages)
        order = ["bandpass", "notch", "resample", "robust_scale", "clamp"]
        positions = [joined.index(stage) for stage in order]
        assert positions == sorted(positions)

    def test_band_edge_clipped_at_low_sfreq(self, caplog):
        rec = _recording(np.random.default_rng(1).normal(size=(1, 2400)), 120.0)
        with caplog.at_level(logging.INFO, logger="decodebench.dsp"):
            out = dsp.preprocess(rec)
        assert any("clipping" in m for m in caplog.messages)
        assert out.sfreq == 120.0

    def test_output_within_clamp(self):
        rec = _recording(np.random.default_rng(2).normal(size=(2, 8000)), 500.0)
        out = dsp.preprocess(rec)
        assert np.abs(out.data).max() <= 20.0
