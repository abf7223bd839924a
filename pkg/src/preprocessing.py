"""Filter design/application for EMG and ACC streams and window segmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import signal

from config import (
    DEFAULT_BANDPASS_HIGH_HZ,
    DEFAULT_BANDPASS_LOW_HZ,
    DEFAULT_BANDPASS_ORDER,
    DEFAULT_INCREMENT_MS,
    DEFAULT_LOWPASS_HZ,
    DEFAULT_LOWPASS_ORDER,
    DEFAULT_NOTCH_Q,
    DEFAULT_WINDOW_MS,
    NYQUIST_CLAMP_RATIO,
)
from dataset_model import Dataset, ModalityKind, SignalStream, TrialKey, TrialRecord
from errors import ConfigError, FilterDesignError, SignalTooShortError
from workers import run_parallel

logger = logging.getLogger(__name__)


class FilterKind(Enum):
    NOTCH = "notch"
    BANDPASS = "bandpass"
    LOWPASS = "lowpass"


@dataclass(frozen=True)
class FilterSpec:
    """
    Filter parameters. corners_hz holds (f0,) for NOTCH, (low, high) for
    BANDPASS and (cutoff,) for LOWPASS; q is only used by NOTCH.
    """

    kind: FilterKind
    corners_hz: tuple[float, ...]
    sample_rate_hz: float
    order: int = 2
    q: Optional[float] = None

    @classmethod
    def notch(cls, f0_hz: float, sample_rate_hz: float, q: float = DEFAULT_NOTCH_Q) -> "FilterSpec":
        return cls(FilterKind.NOTCH, (float(f0_hz),), float(sample_rate_hz), 2, float(q))

    @classmethod
    def bandpass(
        cls,
        sample_rate_hz: float,
        low_hz: float = DEFAULT_BANDPASS_LOW_HZ,
        high_hz: float = DEFAULT_BANDPASS_HIGH_HZ,
        order: int = DEFAULT_BANDPASS_ORDER,
    ) -> "FilterSpec":
        return cls(FilterKind.BANDPASS, (float(low_hz), float(high_hz)), float(sample_rate_hz), int(order))

    @classmethod
    def lowpass(
        cls,
        sample_rate_hz: float,
        cutoff_hz: float = DEFAULT_LOWPASS_HZ,
        order: int = DEFAULT_LOWPASS_ORDER,
    ) -> "FilterSpec":
        return cls(FilterKind.LOWPASS, (float(cutoff_hz),), float(sample_rate_hz), int(order))

    @property
    def nyquist_hz(self) -> float:
        return self.sample_rate_hz / 2.0


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections, rows of (b0, b1, b2, 1, a1, a2)."""

    sos: np.ndarray

    @property
    def n_sections(self) -> int:
        return int(self.sos.shape[0])

    @property
    def total_order(self) -> int:
        return 2 * self.n_sections

    @property
    def pad_length(self) -> int:
        return 3 * self.total_order


@dataclass(frozen=True)
class FilterSettings:
    """Filter parameters applied by preprocess_trial."""

    notch_q: float = DEFAULT_NOTCH_Q
    bandpass_low_hz: float = DEFAULT_BANDPASS_LOW_HZ
    bandpass_high_hz: float = DEFAULT_BANDPASS_HIGH_HZ
    bandpass_order: int = DEFAULT_BANDPASS_ORDER
    lowpass_hz: float = DEFAULT_LOWPASS_HZ
    lowpass_order: int = DEFAULT_LOWPASS_ORDER
    causal: bool = False

    @classmethod
    def from_run_config(cls, cfg) -> "FilterSettings":
        return cls(
            notch_q=cfg.notch_q,
            bandpass_low_hz=cfg.bandpass_low_hz,
            bandpass_high_hz=cfg.bandpass_high_hz,
            bandpass_order=cfg.bandpass_order,
            lowpass_hz=cfg.lowpass_hz,
            lowpass_order=cfg.lowpass_order,
            causal=cfg.causal,
        )


@dataclass(frozen=True)
class WindowSpec:
    length_ms: float = DEFAULT_WINDOW_MS
    increment_ms: float = DEFAULT_INCREMENT_MS

    def __post_init__(self) -> None:
        if self.length_ms <= 0 or self.increment_ms <= 0:
            raise ConfigError("window length and increment must be positive")
        if self.increment_ms > self.length_ms:
            raise ConfigError("window increment must not exceed window length")

    def length_samples(self, sample_rate_hz: float) -> int:
        return int(math.floor(self.length_ms / 1000.0 * sample_rate_hz + 1e-9))

    def increment_samples(self, sample_rate_hz: float) -> int:
        return int(math.floor(self.increment_ms / 1000.0 * sample_rate_hz + 1e-9))


@dataclass(frozen=True)
class Window:
    trial_key: TrialKey
    modality: ModalityKind
    index: int
    start_sample: int
    start_time_s: float
    samples: np.ndarray = field(repr=False)

    @property
    def channel_count(self) -> int:
        return int(self.samples.shape[0])


# ============================================================================
# Filter design and application
# ============================================================================

def _check_corner(spec: FilterSpec, corner: float) -> None:
    if not 0 < corner < spec.nyquist_hz:
        raise FilterDesignError(
            f"{spec.kind.value} corner {corner} Hz not inside (0, {spec.nyquist_hz}) Hz "
            f"at fs={spec.sample_rate_hz} Hz"
        )


@lru_cache(maxsize=64)
def design_filter(spec: FilterSpec) -> BiquadCascade:
    """
    Realize a FilterSpec as a stable biquad cascade.

    Butterworth for BANDPASS/LOWPASS, second-order IIR notch for NOTCH.
    """
    if spec.order < 1:
        raise FilterDesignError(f"filter order must be >= 1, got {spec.order}")
    if spec.sample_rate_hz <= 0:
        raise FilterDesignError("sample rate must be positive")
    for corner in spec.corners_hz:
        _check_corner(spec, corner)

    fs = spec.sample_rate_hz
    if spec.kind is FilterKind.NOTCH:
        b, a = signal.iirnotch(spec.corners_hz[0], spec.q or DEFAULT_NOTCH_Q, fs=fs)
        sos = signal.tf2sos(b, a)
    elif spec.kind is FilterKind.BANDPASS:
        low, high = spec.corners_hz
        if low >= high:
            raise FilterDesignError(f"bandpass low corner {low} Hz >= high corner {high} Hz")
        sos = signal.butter(spec.order, [low, high], btype="bandpass", fs=fs, output="sos")
    else:
        sos = signal.butter(spec.order, spec.corners_hz[0], btype="lowpass", fs=fs, output="sos")

    for section in sos:
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0):
            raise FilterDesignError(f"unstable section in {spec.kind.value} design")

    return BiquadCascade(np.array(sos, dtype=np.float64))


def magnitude_response(c: BiquadCascade, freqs_hz: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """Single-pass |H(f)| of the cascade at the given frequencies."""
    _, h = signal.sosfreqz(c.sos, worN=np.atleast_1d(np.asarray(freqs_hz, dtype=float)), fs=sample_rate_hz)
    return np.abs(h)


def apply_zero_phase(c: BiquadCascade, stream: SignalStream, causal: bool = False) -> SignalStream:
    """
    Forward-backward filtering of every channel with reflect padding of
    3x the total filter order at both ends. causal=True runs a single
    forward pass instead (for streaming reuse).
    """
    n = stream.n_samples
    if n <= c.pad_length:
        raise SignalTooShortError(
            f"{stream.modality.value} stream has {n} samples, needs more than {c.pad_length} for padding"
        )

    if causal:
        # steady-state start from the first sample; zi is (sections, channels, 2)
        zi = signal.sosfilt_zi(c.sos)[:, None, :] * stream.samples[None, :, :1]
        out, _ = signal.sosfilt(c.sos, stream.samples, axis=-1, zi=zi)
    else:
        out = signal.sosfiltfilt(c.sos, stream.samples, axis=-1, padtype="even", padlen=c.pad_length)
    return stream.with_samples(np.ascontiguousarray(out))


def _clamped_high_corner(settings: FilterSettings, sample_rate_hz: float, key: TrialKey) -> float:
    nyquist = sample_rate_hz / 2.0
    if settings.bandpass_high_hz < nyquist:
        return settings.bandpass_high_hz
    clamped = NYQUIST_CLAMP_RATIO * sample_rate_hz
    logger.warning(
        "%s: bandpass high corner %.1f Hz >= Nyquist %.1f Hz, clamped to %.1f Hz",
        key.label(), settings.bandpass_high_hz, nyquist, clamped,
    )
    return clamped


def preprocess_trial(
    t: TrialRecord,
    notch_hz: int = 60,
    settings: FilterSettings = FilterSettings(),
) -> TrialRecord:
    """
    EMG: notch at notch_hz then 20-450 Hz bandpass (high corner clamped to
    0.45 fs when it reaches Nyquist). ACC: 1 Hz lowpass. Labels unchanged.
    """
    if notch_hz not in (50, 60):
        raise ConfigError(f"notch frequency must be 50 or 60 Hz, got {notch_hz}")

    streams = []
    for s in t.streams:
        fs = s.sample_rate_hz
        if s.modality is ModalityKind.EMG:
            notch = design_filter(FilterSpec.notch(notch_hz, fs, settings.notch_q))
            high = _clamped_high_corner(settings, fs, t.key)
            band = design_filter(FilterSpec.bandpass(fs, settings.bandpass_low_hz, high, settings.bandpass_order))
            s = apply_zero_phase(notch, s, settings.causal)
            s = apply_zero_phase(band, s, settings.causal)
        else:
            low = design_filter(FilterSpec.lowpass(fs, settings.lowpass_hz, settings.lowpass_order))
            s = apply_zero_phase(low, s, settings.causal)
        streams.append(s)
    return t.with_streams(streams)


def preprocess_dataset(
    d: Dataset,
    notch_hz: int = 60,
    settings: FilterSettings = FilterSettings(),
    jobs: int = 1,
    progress_callback=None,
) -> Dataset:
    """preprocess_trial over every trial; order and result independent of jobs."""
    trials = run_parallel(
        lambda t: preprocess_trial(t, notch_hz, settings),
        d.trials,
        jobs=jobs,
        progress_callback=progress_callback,
    )
    return d.with_trials(trials)


# ============================================================================
# Windowing
# ============================================================================

def window_count(n_samples: int, length: int, increment: int) -> int:
    """floor((N - L) / I) + 1, or 0 when the stream is shorter than a window."""
    if length < 1 or increment < 1:
        raise ConfigError(f"window of {length} samples / increment {increment} is empty at this rate")
    if n_samples < length:
        return 0
    return (n_samples - length) // increment + 1


def segment_stream(stream: SignalStream, w: WindowSpec, key: TrialKey) -> list[Window]:
    """Windows of one stream; window k starts at sample k * I."""
    fs = stream.sample_rate_hz
    length, increment = w.length_samples(fs), w.increment_samples(fs)
    count = window_count(stream.n_samples, length, increment)
    if count == 0:
        raise SignalTooShortError(
            f"{key.label()}: {stream.modality.value} stream of {stream.n_samples} samples "
            f"is shorter than one {w.length_ms} ms window ({length} samples)"
        )
    return [
        Window(key, stream.modality, k, k * increment, k * increment / fs,
               stream.samples[:, k * increment:k * increment + length])
        for k in range(count)
    ]


def segment_windows(t: TrialRecord, w: WindowSpec) -> dict[ModalityKind, list[Window]]:
    """
    Segment every stream of a trial into paired windows.

    The highest-rate stream is the reference grid (window k at sample k*I).
    Other streams start window k at round(t_k * fs), t_k the reference start
    time, so window k of every modality covers the same stretch of the trial
    to within one slow-stream sample. The paired count is the minimum over
    modalities; when increments are whole samples in every stream this is
    exactly the per-stream count law.
    """
    reference = max(t.streams, key=lambda s: s.sample_rate_hz)
    ref_windows = segment_stream(reference, w, t.key)
    ref_rate = reference.sample_rate_hz

    out = {reference.modality: ref_windows}
    count = len(ref_windows)
    for s in t.streams:
        if s is reference:
            continue
        fs = s.sample_rate_hz
        length = w.length_samples(fs)
        increment = w.increment_samples(fs)
        if window_count(s.n_samples, length, increment) == 0:
            raise SignalTooShortError(
                f"{t.key.label()}: {s.modality.value} stream of {s.n_samples} samples "
                f"is shorter than one {w.length_ms} ms window ({length} samples)"
            )
        windows = []
        for ref in ref_windows:
            start = int(round(ref.start_sample / ref_rate * fs))
            if start + length > s.n_samples:
                break
            windows.append(Window(t.key, s.modality, ref.index, start, start / fs,
                                  s.samples[:, start:start + length]))
        out[s.modality] = windows
        count = min(count, len(windows))

    return {m: ws[:count] for m, ws in out.items()}
