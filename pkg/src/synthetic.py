"""
Deterministic synthetic EMG + accelerometer datasets.

EMG carries gesture information only through per-channel amplitude
profiles of band-limited noise. ACC carries position through the gravity
vector seen by each sensor and, when kappa > 0, gesture through a smooth
gesture-specific orientation trajectory. All randomness flows from the
config seed.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from config import DEFAULT_BANDPASS_HIGH_HZ, DEFAULT_BANDPASS_LOW_HZ
from dataset_model import BIO_GESTURE_NAMES, Dataset, ModalityKind, SignalStream, TrialRecord
from errors import ConfigError
from workers import run_parallel

logger = logging.getLogger(__name__)

PRESETS = ("bio-like", "hci-like")

MODULATION_BAND_HZ = 2.0
GESTURE_ROTATION_DEG = 60.0
RAMP_FRACTION = 0.25

# sagittal-plane pitch per position: forearm sensor, upper-arm sensor
BIO_POSITION_PITCH_DEG = [(0.0, 90.0), (45.0, 90.0), (90.0, 90.0), (45.0, 0.0), (-45.0, 0.0)]

HCI_WRIST_NAMES = {9: "WF", 10: "WE", 11: "WP", 12: "WS"}
HCI_GRASP_NAMES = {18: "PO", 19: "PI"}


@dataclass(frozen=True, eq=False)
class SyntheticConfig:
    """
    Generator parameters. Arrays are indexed by gesture index (position in
    gesture_ids) and position index; position_count == 0 means trials carry
    no position label and position_orientations holds one nominal pose.
    """

    name: str
    subjects: int
    gesture_ids: tuple[int, ...]
    gesture_names: dict[int, str]
    position_count: int
    repetitions: int
    emg_channels: int
    emg_rate_hz: float
    acc_sensors: int
    acc_rate_hz: float
    activation: np.ndarray              # gestures x emg_channels, entries in [0, 1]
    position_orientations: np.ndarray   # max(1, positions) x sensors x 3, unit vectors
    gesture_orientations: np.ndarray    # gestures x sensors x 3, unit vectors
    kappa: float = 0.0
    duration_s: float = 2.0
    emg_band_hz: tuple[float, float] = (DEFAULT_BANDPASS_LOW_HZ, DEFAULT_BANDPASS_HIGH_HZ)
    emg_modulation: float = 0.05
    intensity_jitter: float = 0.05
    position_emg_perturbation: float = 0.10
    emg_baseline: float = 0.02
    orientation_jitter_deg: float = 3.0
    acc_vibration_g: float = 0.02
    seed: int = 0
    position_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n_gestures = len(self.gesture_ids)
        if self.subjects < 1 or self.repetitions < 1 or n_gestures < 1:
            raise ConfigError("subjects, repetitions and gestures must be >= 1")
        if len(set(self.gesture_ids)) != n_gestures:
            raise ConfigError("duplicate gesture ids")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa must be in [0, 1], got {self.kappa}")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        low, high = self.emg_band_hz
        if not 0 < low < high < self.emg_rate_hz / 2:
            raise ConfigError(f"EMG band {self.emg_band_hz} invalid for {self.emg_rate_hz} Hz")

        if self.activation.shape != (n_gestures, self.emg_channels):
            raise ConfigError(f"activation matrix must be {n_gestures} x {self.emg_channels}")
        if np.any(self.activation < 0) or np.any(self.activation > 1):
            raise ConfigError("activation entries must lie in [0, 1]")
        if len({row.tobytes() for row in self.activation}) != n_gestures:
            raise ConfigError("activation rows must be distinct for distinct gestures")

        poses = max(1, self.position_count)
        for what, arr, rows in (
            ("position_orientations", self.position_orientations, poses),
            ("gesture_orientations", self.gesture_orientations, n_gestures),
        ):
            if arr.shape != (rows, self.acc_sensors, 3):
                raise ConfigError(f"{what} must be {rows} x {self.acc_sensors} x 3")
            if np.any(np.abs(np.linalg.norm(arr, axis=-1) - 1.0) > 1e-9):
                raise ConfigError(f"{what} must hold unit vectors")

    @property
    def acc_axes(self) -> int:
        return 3 * self.acc_sensors

    @property
    def has_positions(self) -> bool:
        return self.position_count > 0

    @property
    def trial_count(self) -> int:
        return self.subjects * len(self.gesture_ids) * max(1, self.position_count) * self.repetitions


# ============================================================================
# Presets
# ============================================================================

def _pitch_vector(pitch_deg: float) -> np.ndarray:
    theta = math.radians(pitch_deg)
    return np.array([math.sin(theta), 0.0, math.cos(theta)])


def _fibonacci_axes(n: int) -> np.ndarray:
    """n roughly evenly spread unit vectors."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z ** 2)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def activation_matrix(
    n_gestures: int,
    channels: int,
    base: float,
    contrast: float,
    width: float,
    rest_first: bool = False,
) -> np.ndarray:
    """
    Gaussian bump of activation around a gesture-specific channel centre
    (circular over the electrode ring). With rest_first, row 0 is all zero.
    """
    active = n_gestures - 1 if rest_first else n_gestures
    centres = np.arange(active) * channels / active
    c = np.arange(channels)
    dist = np.abs(centres[:, None] - c[None, :])
    dist = np.minimum(dist, channels - dist)
    rows = base + contrast * np.exp(-dist ** 2 / (2.0 * width ** 2))
    if rest_first:
        rows = np.vstack([np.zeros(channels), rows])
    return np.clip(rows, 0.0, 1.0)


def gesture_orientation_set(reference: np.ndarray, n_gestures: int, rest_first: bool = False) -> np.ndarray:
    """Reference sensor orientations rotated by a distinct pose per gesture; rest keeps the reference."""
    active = n_gestures - 1 if rest_first else n_gestures
    axes = _fibonacci_axes(active)
    poses = [Rotation.from_rotvec(axis * math.radians(GESTURE_ROTATION_DEG)) for axis in axes]
    out = [pose.apply(reference) for pose in poses]
    if rest_first:
        out.insert(0, reference.copy())
    arr = np.stack(out)
    return arr / np.linalg.norm(arr, axis=-1, keepdims=True)


def _scaled(count: int, scale: float) -> int:
    return max(2, int(math.floor(count * scale)))


def hci_gesture_names() -> dict[int, str]:
    names = {g: f"F{g}" for g in range(1, 9)}
    names.update({g: HCI_WRIST_NAMES.get(g, f"W{g - 8}") for g in range(9, 18)})
    names.update({g: HCI_GRASP_NAMES.get(g, f"G{g - 17}") for g in range(18, 41)})
    return names


def preset(name: str, scale: float = 1.0, seed: int = 0, kappa: Optional[float] = None) -> SyntheticConfig:
    """
    Named generator configuration.

    bio-like: 12 subjects, rest + 6 gestures, 5 positions, 10 repetitions,
        8 EMG channels at 2 kHz, 2 tri-axis sensors at 148 Hz, kappa 0.
    hci-like: 20 subjects, 40 gestures, one nominal position, 6 repetitions,
        12 EMG channels, 12 tri-axis sensors, kappa 1.

    Args:
        name: "bio-like" or "hci-like"
        scale: multiplies subject and repetition counts (floor, minimum 2)
        seed: generator seed
        kappa: optional override of the positional coupling

    Returns:
        SyntheticConfig
    """
    if not 0 < scale <= 1:
        raise ConfigError(f"scale must be in (0, 1], got {scale}")

    if name == "bio-like":
        gesture_ids = tuple(sorted(BIO_GESTURE_NAMES))
        positions = np.stack([
            np.stack([_pitch_vector(forearm), _pitch_vector(upper)])
            for forearm, upper in BIO_POSITION_PITCH_DEG
        ])
        config = SyntheticConfig(
            name="synthetic-bio-like",
            subjects=_scaled(12, scale),
            gesture_ids=gesture_ids,
            gesture_names=dict(BIO_GESTURE_NAMES),
            position_count=len(BIO_POSITION_PITCH_DEG),
            repetitions=_scaled(10, scale),
            emg_channels=8,
            emg_rate_hz=2000.0,
            acc_sensors=2,
            acc_rate_hz=148.0,
            activation=activation_matrix(len(gesture_ids), 8, base=0.1, contrast=0.9, width=1.0, rest_first=True),
            position_orientations=positions,
            gesture_orientations=gesture_orientation_set(positions[0], len(gesture_ids), rest_first=True),
            kappa=0.0,
            emg_modulation=0.05,
            intensity_jitter=0.05,
            orientation_jitter_deg=3.0,
            seed=seed,
            position_names={p: f"P{p + 1}" for p in range(len(BIO_POSITION_PITCH_DEG))},
        )
    elif name == "hci-like":
        names = hci_gesture_names()
        gesture_ids = tuple(sorted(names))
        # sensors spaced around the forearm, gravity perpendicular to its axis
        phi = 2.0 * np.pi * np.arange(12) / 12
        nominal = np.column_stack([np.zeros(12), np.sin(phi), np.cos(phi)])[None, :, :]
        config = SyntheticConfig(
            name="synthetic-hci-like",
            subjects=_scaled(20, scale),
            gesture_ids=gesture_ids,
            gesture_names=names,
            position_count=0,
            repetitions=_scaled(6, scale),
            emg_channels=12,
            emg_rate_hz=2000.0,
            acc_sensors=12,
            acc_rate_hz=148.0,
            activation=activation_matrix(len(gesture_ids), 12, base=0.4, contrast=0.4, width=1.5),
            position_orientations=nominal,
            gesture_orientations=gesture_orientation_set(nominal[0], len(gesture_ids)),
            kappa=1.0,
            emg_modulation=0.25,
            intensity_jitter=0.10,
            orientation_jitter_deg=5.0,
            seed=seed,
        )
    else:
        raise ConfigError(f"unknown preset {name!r} (expected one of {list(PRESETS)})")

    return with_kappa(config, kappa) if kappa is not None else config


def with_kappa(config: SyntheticConfig, kappa: float) -> SyntheticConfig:
    return replace(config, kappa=float(kappa))


# ============================================================================
# Signal models
# ============================================================================

def band_noise(rng: np.random.Generator, shape: tuple[int, int], fs: float, low: float, high: float) -> np.ndarray:
    """Gaussian noise with all spectral mass in [low, high] Hz, unit RMS per row."""
    n = shape[-1]
    spectrum = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spectrum[..., (freqs < low) | (freqs > high)] = 0.0
    out = np.fft.irfft(spectrum, n=n, axis=-1)
    rms = np.sqrt(np.mean(out ** 2, axis=-1, keepdims=True))
    return out / np.where(rms > 0, rms, 1.0)


def ramp(t: np.ndarray, duration_s: float) -> np.ndarray:
    """Raised-cosine rise over the first quarter of the trial, then held at 1."""
    r = np.clip(t / (RAMP_FRACTION * duration_s), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * r)


def _trial_rng(config: SyntheticConfig, subject: int, gesture: int, position: Optional[int], repetition: int):
    position_code = 0 if position is None else position + 1
    return np.random.default_rng(
        np.random.SeedSequence([config.seed, subject, gesture, position_code, repetition, 1])
    )


def subject_perturbation(config: SyntheticConfig, subject: int) -> np.ndarray:
    """Per-(position, channel) multiplicative EMG gain of one subject."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, subject, 2]))
    poses = max(1, config.position_count)
    delta = rng.uniform(-1.0, 1.0, size=(poses, config.emg_channels))
    if not config.has_positions:
        delta[:] = 0.0
    return 1.0 + config.position_emg_perturbation * delta


def _emg(config: SyntheticConfig, rng, gesture_index: int, gains: np.ndarray) -> np.ndarray:
    n = int(round(config.duration_s * config.emg_rate_hz))
    shape = (config.emg_channels, n)
    low, high = config.emg_band_hz
    carrier = band_noise(rng, shape, config.emg_rate_hz, low, high)
    modulation = 1.0 + config.emg_modulation * band_noise(rng, shape, config.emg_rate_hz, 0.0, MODULATION_BAND_HZ)
    intensity = max(0.0, 1.0 + config.intensity_jitter * rng.standard_normal())
    amplitude = config.activation[gesture_index] * gains * intensity
    baseline = config.emg_baseline * band_noise(rng, shape, config.emg_rate_hz, low, high)
    return amplitude[:, None] * np.clip(modulation, 0.0, None) * carrier + baseline


def _acc(config: SyntheticConfig, rng, gesture_index: int, pose_index: int) -> np.ndarray:
    m = int(round(config.duration_s * config.acc_rate_hz))
    t = np.arange(m) / config.acc_rate_hz
    blend = config.kappa * ramp(t, config.duration_s)[:, None, None]
    u = config.position_orientations[pose_index][None, :, :]
    v = config.gesture_orientations[gesture_index][None, :, :]
    orientation = (1.0 - blend) * u + blend * v
    orientation /= np.maximum(np.linalg.norm(orientation, axis=-1, keepdims=True), 1e-12)

    axis = rng.standard_normal(3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = math.radians(config.orientation_jitter_deg) * rng.standard_normal()
    jitter = Rotation.from_rotvec(axis * angle)
    rotated = jitter.apply(orientation.reshape(-1, 3)).reshape(m, config.acc_sensors * 3)

    vibration = config.acc_vibration_g * rng.standard_normal(rotated.shape)
    return (rotated + vibration).T


def generate_trial(
    config: SyntheticConfig,
    subject: int,
    gesture_index: int,
    position_index: Optional[int],
    repetition: int,
    gains: Optional[np.ndarray] = None,
) -> TrialRecord:
    gesture = config.gesture_ids[gesture_index]
    rng = _trial_rng(config, subject, gesture, position_index, repetition)
    pose = 0 if position_index is None else position_index
    if gains is None:
        gains = subject_perturbation(config, subject)[pose]

    streams = (
        SignalStream(ModalityKind.EMG, config.emg_rate_hz, _emg(config, rng, gesture_index, gains)),
        SignalStream(ModalityKind.ACC, config.acc_rate_hz, _acc(config, rng, gesture_index, pose)),
    )
    return TrialRecord(subject, gesture, position_index, repetition, streams)


def generate(config: SyntheticConfig, jobs: int = 1, progress_callback=None) -> Dataset:
    """
    Generate every (subject, gesture, position, repetition) trial.

    Args:
        config: generator parameters
        jobs: trials generated concurrently (output independent of jobs)
        progress_callback: optional callback(done, total)

    Returns:
        Dataset: subjects and repetitions numbered from 1
    """
    positions: list[Optional[int]] = list(range(config.position_count)) if config.has_positions else [None]
    gains = {s: subject_perturbation(config, s) for s in range(1, config.subjects + 1)}
    items = [
        (s, g, p, r)
        for s in range(1, config.subjects + 1)
        for g in range(len(config.gesture_ids))
        for p in positions
        for r in range(1, config.repetitions + 1)
    ]
    logger.info("Generating %d %s trials (kappa=%.2f, seed=%d)", len(items), config.name, config.kappa, config.seed)

    trials = run_parallel(
        lambda item: generate_trial(config, item[0], item[1], item[2], item[3],
                                    gains[item[0]][0 if item[2] is None else item[2]]),
        items,
        jobs=jobs,
        progress_callback=progress_callback,
    )
    return Dataset(config.name, tuple(trials), dict(config.gesture_names), dict(config.position_names))


def describe(config: SyntheticConfig) -> dict:
    """JSON-safe summary echoed into bundle provenance."""
    return {
        "name": config.name,
        "subjects": config.subjects,
        "gestures": len(config.gesture_ids),
        "positions": config.position_count,
        "repetitions": config.repetitions,
        "duration_s": config.duration_s,
        "emg_channels": config.emg_channels,
        "emg_rate_hz": config.emg_rate_hz,
        "acc_axes": config.acc_axes,
        "acc_rate_hz": config.acc_rate_hz,
        "kappa": config.kappa,
        "emg_modulation": config.emg_modulation,
        "intensity_jitter": config.intensity_jitter,
        "position_emg_perturbation": config.position_emg_perturbation,
        "emg_baseline": config.emg_baseline,
        "orientation_jitter_deg": config.orientation_jitter_deg,
        "acc_vibration_g": config.acc_vibration_g,
        "seed": config.seed,
    }
