"""Configuration constants and the resolved run configuration."""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from errors import ConfigError

# Preprocessing defaults
DEFAULT_NOTCH_HZ = 60
DEFAULT_NOTCH_Q = 30.0
DEFAULT_BANDPASS_LOW_HZ = 20.0
DEFAULT_BANDPASS_HIGH_HZ = 450.0
DEFAULT_BANDPASS_ORDER = 4
DEFAULT_LOWPASS_HZ = 1.0
DEFAULT_LOWPASS_ORDER = 2
NYQUIST_CLAMP_RATIO = 0.45

# Windowing defaults
DEFAULT_WINDOW_MS = 200.0
DEFAULT_INCREMENT_MS = 100.0

# Feature defaults
DEFAULT_FEATURE_KINDS = ["emg-td", "emg-tdpsd", "acc-med", "acc-rms"]
DEFAULT_ZC_SSC_THRESHOLD = 0.0
TDPSD_VERSION = "tdpsd-v1"
TDPSD_EPSILON = 1e-10
TDPSD_LAMBDA = 0.1

# Classifier defaults
DEFAULT_CLASSIFIERS = ["lda", "qda", "knn", "rf"]
DEFAULT_KNN_K = 5
DEFAULT_RF_TREES = 10
DEFAULT_RIDGE_GAMMA = 1e-6

# Evaluation defaults
DEFAULT_TASKS = ["position", "gesture", "sequential"]
DEFAULT_EXCLUDED_GESTURES = ["NM"]
SIGNIFICANCE_ALPHA = 0.05
EXACT_WILCOXON_MAX_N = 25

# Processing defaults
DEFAULT_SEED = 0
DEFAULT_JOBS = 1
DEFAULT_OUTPUT_DIR = "out"
DEFAULT_PRESET = "bio-like"
DEFAULT_SCALE = 1.0

MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT_VERSION = 1
MODEL_FORMAT_VERSION = 1
STORE_INDEX_NAME = "store.json"

# TOML table -> RunConfig fields it may set
CONFIG_TABLES = {
    "bundle": {"bundle_path"},
    "preprocess": {
        "notch_hz", "notch_q", "bandpass_low_hz", "bandpass_high_hz",
        "bandpass_order", "lowpass_hz", "lowpass_order", "causal",
    },
    "windows": {"window_ms", "increment_ms"},
    "features": {"feature_kinds", "zc_ssc_threshold"},
    "eval": {
        "classifiers", "tasks", "subset", "exclude_gestures",
        "gesture_classifier", "seed", "jobs",
    },
    "synth": {"preset", "scale", "kappa"},
    "output": {"output_dir"},
}


@dataclass(frozen=True)
class RunConfig:
    """Every knob a pipeline run depends on; echoed into every output."""

    bundle_path: Optional[str] = None
    notch_hz: int = DEFAULT_NOTCH_HZ
    notch_q: float = DEFAULT_NOTCH_Q
    bandpass_low_hz: float = DEFAULT_BANDPASS_LOW_HZ
    bandpass_high_hz: float = DEFAULT_BANDPASS_HIGH_HZ
    bandpass_order: int = DEFAULT_BANDPASS_ORDER
    lowpass_hz: float = DEFAULT_LOWPASS_HZ
    lowpass_order: int = DEFAULT_LOWPASS_ORDER
    causal: bool = False
    window_ms: float = DEFAULT_WINDOW_MS
    increment_ms: float = DEFAULT_INCREMENT_MS
    feature_kinds: list[str] = field(default_factory=lambda: list(DEFAULT_FEATURE_KINDS))
    zc_ssc_threshold: float = DEFAULT_ZC_SSC_THRESHOLD
    classifiers: list[str] = field(default_factory=lambda: list(DEFAULT_CLASSIFIERS))
    tasks: list[str] = field(default_factory=lambda: list(DEFAULT_TASKS))
    subset: Optional[str] = None
    exclude_gestures: list[str] = field(default_factory=lambda: list(DEFAULT_EXCLUDED_GESTURES))
    gesture_classifier: Optional[str] = None
    seed: int = DEFAULT_SEED
    jobs: int = DEFAULT_JOBS
    preset: str = DEFAULT_PRESET
    scale: float = DEFAULT_SCALE
    kappa: Optional[float] = None
    output_dir: str = DEFAULT_OUTPUT_DIR

    def __post_init__(self) -> None:
        if self.notch_hz not in (50, 60):
            raise ConfigError(f"notch_hz must be 50 or 60, got {self.notch_hz}")
        if self.window_ms <= 0 or self.increment_ms <= 0:
            raise ConfigError("window_ms and increment_ms must be positive")
        if self.increment_ms > self.window_ms:
            raise ConfigError(
                f"increment_ms ({self.increment_ms}) exceeds window_ms ({self.window_ms})"
            )
        if self.bandpass_order < 1 or self.lowpass_order < 1:
            raise ConfigError("filter orders must be >= 1")
        if self.notch_q <= 0:
            raise ConfigError("notch_q must be positive")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"scale must be in (0, 1], got {self.scale}")
        if self.kappa is not None and not 0 <= self.kappa <= 1:
            raise ConfigError(f"kappa must be in [0, 1], got {self.kappa}")
        if self.zc_ssc_threshold < 0:
            raise ConfigError("zc_ssc_threshold must be >= 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply non-None overrides (typically CLI flags) over this config."""
        known = {f.name for f in fields(self)}
        updates = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
            updates[key] = value
        return replace(self, **updates)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_type(key: str, value: Any, expected: Any) -> Any:
    if isinstance(expected, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected boolean")
        return value
    if isinstance(expected, int) and not isinstance(expected, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected integer")
        return value
    if isinstance(expected, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number")
        return float(value)
    if isinstance(expected, list):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{key}: expected list of strings")
        return value
    return value


def load_run_config(path: Optional[str | Path]) -> RunConfig:
    """
    Read a TOML run config; missing keys keep their defaults.

    Args:
        path: TOML file, or None for an all-defaults config

    Returns:
        RunConfig: validated configuration
    """
    if path is None:
        return RunConfig()

    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from None

    defaults = RunConfig()
    values: dict[str, Any] = {}
    for table, entries in raw.items():
        allowed = CONFIG_TABLES.get(table)
        if allowed is None:
            raise ConfigError(f"unknown config table: [{table}]")
        if not isinstance(entries, dict):
            raise ConfigError(f"[{table}] must be a table")
        for key, value in entries.items():
            if key not in allowed:
                raise ConfigError(f"unknown key in [{table}]: {key}")
            values[key] = _check_type(key, value, getattr(defaults, key))

    return RunConfig(**values)
