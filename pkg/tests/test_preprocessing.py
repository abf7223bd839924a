import logging

import numpy as np
import pytest

from conftest import make_trial
from dataset_model import ModalityKind, SignalStream, TrialKey, TrialRecord
from errors import ConfigError, FilterDesignError, SignalTooShortError
from preprocessing import (
    FilterSettings,
    FilterSpec,
    WindowSpec,
    apply_zero_phase,
    design_filter,
    magnitude_response,
    preprocess_trial,
    segment_stream,
    segment_windows,
    window_count,
)

KEY = TrialKey(1, 1, 1, 1)


def _db(x):
    return 20 * np.log10(x)


def _stream(samples, fs, modality=ModalityKind.EMG):
    return SignalStream(modality, fs, np.atleast_2d(np.asarray(samples, dtype=float)))


def _fit_sinusoid(y, t, freq):
    """Least-squares (amplitude, phase) of a sinusoid at a known frequency."""
    basis = np.column_stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)])
    (s, c), *_ = np.linalg.lstsq(basis, y, rcond=None)
    return np.hypot(s, c), np.arctan2(c, s)


# ============================================================================
# Design
# ============================================================================

@pytest.mark.parametrize("f0", [50, 60])
def test_notch_attenuates_mains(f0):
    c = design_filter(FilterSpec.notch(f0, 2000.0))
    assert _db(magnitude_response(c, [f0], 2000.0)[0] + 1e-300) <= -30


def test_bandpass_shape():
    c = design_filter(FilterSpec.bandpass(2000.0))
    mag = magnitude_response(c, [10.0, 95.0, 900.0], 2000.0)
    assert mag[0] < mag[1]
    assert mag[2] < mag[1]
    assert abs(mag[1] - 1.0) < 0.01


def test_lowpass_dc_gain_and_stopband():
    c = design_filter(FilterSpec.lowpass(148.0))
    dc, stop = magnitude_response(c, [0.0, 20.0], 148.0)
    assert abs(dc - 1.0) < 1e-9
    assert _db(stop) <= -40


def test_every_section_is_stable():
    for spec in (FilterSpec.notch(60, 1000.0), FilterSpec.bandpass(1000.0), FilterSpec.lowpass(100.0)):
        sos = design_filter(spec).sos
        for section in sos:
            assert np.all(np.abs(np.roots(section[3:])) < 1)


@pytest.mark.parametrize("spec", [
    FilterSpec.lowpass(100.0, cutoff_hz=60.0),
    FilterSpec.bandpass(1000.0, low_hz=20.0, high_hz=500.0),
    FilterSpec.bandpass(1000.0, low_hz=300.0, high_hz=200.0),
    FilterSpec.lowpass(100.0, order=0),
])
def test_invalid_designs(spec):
    with pytest.raises(FilterDesignError):
        design_filter(spec)


# ============================================================================
# Application
# ============================================================================

def test_zero_phase_passband_sinusoid():
    fs = 2000.0
    t = np.arange(4000) / fs
    x = np.sin(2 * np.pi * 95.0 * t)
    c = design_filter(FilterSpec.bandpass(fs))
    y = apply_zero_phase(c, _stream(x, fs)).samples[0]

    middle = slice(1000, 3000)
    amp, phase = _fit_sinusoid(y[middle], t[middle], 95.0)
    _, phase_in = _fit_sinusoid(x[middle], t[middle], 95.0)
    assert abs(amp - 1.0) < 0.01
    assert abs(phase - phase_in) < 1e-3

    lags = np.arange(-20, 21)
    xcorr = [np.dot(x[middle], np.roll(y, -lag)[middle]) for lag in lags]
    assert lags[int(np.argmax(xcorr))] == 0


def test_dc_offset_is_removed():
    fs = 2000.0
    rng = np.random.default_rng(0)
    x = 5.0 + 0.1 * rng.standard_normal(4000)
    y = apply_zero_phase(design_filter(FilterSpec.bandpass(fs)), _stream(x, fs)).samples[0]
    assert abs(np.mean(y)) < 0.01


def test_all_zero_input_stays_zero():
    c = design_filter(FilterSpec.bandpass(2000.0))
    y = apply_zero_phase(c, _stream(np.zeros((3, 500)), 2000.0))
    assert np.all(y.samples == 0)


@pytest.mark.parametrize("causal", [False, True])
def test_cached_design_filters_repeatedly(causal):
    spec = FilterSpec.lowpass(148.0)
    stream = _stream(np.zeros((3, 296)), 148.0, ModalityKind.ACC)
    first = design_filter(spec)
    assert design_filter(spec) is first
    for _ in range(2):
        y = apply_zero_phase(design_filter(spec), stream, causal=causal)
        assert y.samples.shape == (3, 296)
        assert np.all(y.samples == 0)


def test_notch_twice_keeps_broadband_power():
    fs = 2000.0
    x = np.random.default_rng(1).standard_normal(20000)
    c = design_filter(FilterSpec.notch(60, fs))
    once = apply_zero_phase(c, _stream(x, fs))
    twice = apply_zero_phase(c, once)
    rms_once = np.sqrt(np.mean(once.samples ** 2))
    rms_twice = np.sqrt(np.mean(twice.samples ** 2))
    assert abs(rms_twice / rms_once - 1.0) < 0.01


def test_too_short_stream():
    c = design_filter(FilterSpec.bandpass(2000.0))
    with pytest.raises(SignalTooShortError):
        apply_zero_phase(c, _stream(np.ones(c.pad_length), 2000.0))


def test_causal_mode_keeps_length_but_shifts_phase():
    fs = 2000.0
    t = np.arange(4000) / fs
    x = np.sin(2 * np.pi * 200.0 * t)
    c = design_filter(FilterSpec.bandpass(fs))
    y = apply_zero_phase(c, _stream(x, fs), causal=True).samples[0]
    assert y.shape == x.shape
    _, phase = _fit_sinusoid(y[1000:3000], t[1000:3000], 200.0)
    _, phase_in = _fit_sinusoid(x[1000:3000], t[1000:3000], 200.0)
    assert abs(phase - phase_in) > 0.05


def test_preprocess_trial_keeps_labels_and_shapes():
    trial = make_trial(subject=4, gesture=2, position=3, repetition=5)
    out = preprocess_trial(trial, 50)
    assert out.key == trial.key
    for modality in ModalityKind:
        assert out.stream(modality).samples.shape == trial.stream(modality).samples.shape


def test_preprocess_rejects_other_mains():
    with pytest.raises(ConfigError):
        preprocess_trial(make_trial(), 55)


def test_low_rate_emg_clamps_high_corner(caplog):
    trial = make_trial(emg_rate=800.0, emg_samples=320, acc_rate=100.0, acc_samples=40)
    with caplog.at_level(logging.WARNING):
        preprocess_trial(trial, 60, FilterSettings())
    assert "clamped to 360.0 Hz" in caplog.text


# ============================================================================
# Windowing
# ============================================================================

def test_window_count_examples():
    w = WindowSpec(200, 100)
    assert window_count(1000, w.length_samples(1000), w.increment_samples(1000)) == 9
    assert window_count(200, w.length_samples(1000), w.increment_samples(1000)) == 1
    assert window_count(199, w.length_samples(1000), w.increment_samples(1000)) == 0


def test_two_second_trial_pairs_nineteen_windows():
    trial = TrialRecord(1, 1, 1, 1, (
        _stream(np.zeros((8, 4000)), 2000.0),
        _stream(np.zeros((6, 200)), 100.0, ModalityKind.ACC),
    ))
    windows = segment_windows(trial, WindowSpec(200, 100))
    assert len(windows[ModalityKind.EMG]) == 19
    assert len(windows[ModalityKind.ACC]) == 19
    for emg, acc in zip(windows[ModalityKind.EMG], windows[ModalityKind.ACC]):
        assert emg.index == acc.index
        assert abs(emg.start_time_s - acc.start_time_s) < 1 / 100.0


def test_pairing_at_non_integer_increment():
    # 148 Hz: 29-sample windows, 14.8-sample increment
    trial = TrialRecord(1, 1, 1, 1, (
        _stream(np.zeros((8, 4000)), 2000.0),
        _stream(np.zeros((6, 296)), 148.0, ModalityKind.ACC),
    ))
    windows = segment_windows(trial, WindowSpec(200, 100))
    assert len(windows[ModalityKind.EMG]) == len(windows[ModalityKind.ACC]) == 19
    for emg, acc in zip(windows[ModalityKind.EMG], windows[ModalityKind.ACC]):
        assert abs(emg.start_time_s - acc.start_time_s) <= 0.5 / 148.0 + 1e-12
        assert acc.samples.shape == (6, 29)


def test_window_law_randomized():
    rng = np.random.default_rng(42)
    for _ in range(50):
        fs = float(rng.choice([100.0, 148.0, 1000.0, 1200.0, 2000.0]))
        length_ms = float(rng.integers(50, 400))
        increment_ms = float(rng.integers(10, int(length_ms) + 1))
        w = WindowSpec(length_ms, increment_ms)
        length, increment = w.length_samples(fs), w.increment_samples(fs)
        if length < 1 or increment < 1:
            continue
        n = int(rng.integers(length, 10 * length + 1))

        windows = segment_stream(_stream(np.arange(n, dtype=float), fs), w, KEY)
        assert len(windows) == (n - length) // increment + 1
        for k, win in enumerate(windows):
            assert win.start_sample == k * increment
            assert win.samples.shape == (1, length)
            assert win.start_sample + length <= n
        for a, b in zip(windows, windows[1:]):
            overlap = a.start_sample + length - b.start_sample
            assert overlap == max(length - increment, 0)


def test_short_stream_raises():
    with pytest.raises(SignalTooShortError):
        segment_stream(_stream(np.zeros(100), 1000.0), WindowSpec(200, 100), KEY)


def test_increment_larger_than_length_rejected():
    with pytest.raises(ConfigError):
        WindowSpec(100, 200)
