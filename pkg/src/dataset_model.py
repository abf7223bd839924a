"""
Multi-modal gesture datasets: in-memory types, canonical bundle I/O,
gesture subsets and validation.

Bundle layout (one directory):
    manifest.json
    trials/s{subject}_g{gesture}_p{position|x}_r{repetition}_{modality}.csv|.f32

manifest.json:
{
    "format_version": 1,
    "name": "bio-like",
    "encoding": "csv" | "f32le",
    "gesture_names": {"1": "WF", ...},
    "position_names": {"1": "P1", ...},
    "provenance": {...},   # resolved run config, tool stage
    "trials": [
        {"subject": 1, "gesture": 1, "position": 1 | null, "repetition": 1,
         "streams": [{"modality": "emg", "channels": 8, "sample_rate_hz": 2000.0,
                      "file": "trials/...", "samples": 4000}]}
    ]
}
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np
import pandas as pd

from config import BUNDLE_FORMAT_VERSION, MANIFEST_NAME
from errors import BundleError, SubsetError

logger = logging.getLogger(__name__)

ENCODINGS = ("csv", "f32le")

# Biomedical-shaped gesture vocabulary; 0 is the no-motion class
BIO_GESTURE_NAMES = {0: "NM", 1: "WF", 2: "WE", 3: "WP", 4: "WS", 5: "PO", 6: "PI"}


class ModalityKind(Enum):
    EMG = "emg"
    ACC = "acc"


class TrialKey(NamedTuple):
    subject: int
    gesture: int
    position: Optional[int]
    repetition: int

    def label(self) -> str:
        pos = "x" if self.position is None else str(self.position)
        return f"s{self.subject}_g{self.gesture}_p{pos}_r{self.repetition}"


@dataclass(frozen=True)
class SignalStream:
    """One modality of one trial; samples is channel_count x N."""

    modality: ModalityKind
    sample_rate_hz: float
    samples: np.ndarray

    @property
    def channel_count(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[1])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def with_samples(self, samples: np.ndarray) -> "SignalStream":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class TrialRecord:
    subject_id: int
    gesture_id: int
    position_id: Optional[int]
    repetition: int
    streams: tuple[SignalStream, ...]

    @property
    def key(self) -> TrialKey:
        return TrialKey(self.subject_id, self.gesture_id, self.position_id, self.repetition)

    def stream(self, modality: ModalityKind) -> SignalStream:
        for s in self.streams:
            if s.modality is modality:
                return s
        raise KeyError(f"trial {self.key.label()} has no {modality.value} stream")

    def has(self, modality: ModalityKind) -> bool:
        return any(s.modality is modality for s in self.streams)

    def with_streams(self, streams: Iterable[SignalStream]) -> "TrialRecord":
        return replace(self, streams=tuple(streams))


@dataclass(frozen=True)
class Dataset:
    name: str
    trials: tuple[TrialRecord, ...]
    gesture_names: dict[int, str]
    position_names: dict[int, str] = field(default_factory=dict)

    @property
    def has_positions(self) -> bool:
        return any(t.position_id is not None for t in self.trials)

    @property
    def subjects(self) -> list[int]:
        return sorted({t.subject_id for t in self.trials})

    @property
    def gesture_ids(self) -> list[int]:
        return sorted({t.gesture_id for t in self.trials})

    @property
    def position_ids(self) -> list[int]:
        return sorted({t.position_id for t in self.trials if t.position_id is not None})

    def with_trials(self, trials: Iterable[TrialRecord]) -> "Dataset":
        return replace(self, trials=tuple(trials))


@dataclass(frozen=True)
class GestureSubset:
    name: str
    gesture_ids: frozenset[int]

    def __post_init__(self) -> None:
        if not self.gesture_ids:
            raise SubsetError(f"subset {self.name!r} has no gesture ids")


@dataclass(frozen=True)
class Violation:
    key: Optional[TrialKey]
    reason: str

    def __str__(self) -> str:
        where = self.key.label() if self.key else "dataset"
        return f"{where}: {self.reason}"


# ============================================================================
# Gesture subsets
# ============================================================================

# hci-like numbering: 1-8 finger, 9-17 wrist, 18-40 grasp
BUILTIN_SUBSETS = {
    "HCI-A": frozenset({9, 10, 11, 12, 18, 19}),
    "HCI-B": frozenset(range(1, 9)),
    "HCI-C": frozenset(range(18, 41)),
}


def load_subset(source: str | Path) -> GestureSubset:
    """Resolve a built-in subset name or read a {name, gesture_ids} JSON file."""
    name = str(source)
    if name.upper() in BUILTIN_SUBSETS:
        return GestureSubset(name.upper(), BUILTIN_SUBSETS[name.upper()])

    path = Path(source)
    if not path.is_file():
        raise SubsetError(f"unknown subset {name!r} (not a built-in name or file)")
    try:
        data = json.loads(path.read_text())
        ids = frozenset(int(g) for g in data["gesture_ids"])
        return GestureSubset(str(data.get("name", path.stem)), ids)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise SubsetError(f"invalid subset file {path}: {e}") from None


def filter_subset(d: Dataset, s: GestureSubset) -> Dataset:
    """Keep exactly the trials whose gesture is in the subset."""
    missing = sorted(set(s.gesture_ids) - set(d.gesture_ids))
    if missing:
        raise SubsetError(f"subset {s.name} references gesture ids absent from {d.name}: {missing}")

    trials = [t for t in d.trials if t.gesture_id in s.gesture_ids]
    names = {g: n for g, n in d.gesture_names.items() if g in s.gesture_ids}
    return replace(d, trials=tuple(trials), gesture_names=names)


def exclude_gestures(d: Dataset, names: Iterable[str]) -> Dataset:
    """Drop trials whose gesture name is in `names` (e.g. the no-motion class)."""
    excluded = {g for g, n in d.gesture_names.items() if n in set(names)}
    if not excluded:
        return d
    logger.info("Excluding gestures %s", sorted(d.gesture_names[g] for g in excluded))
    trials = [t for t in d.trials if t.gesture_id not in excluded]
    gesture_names = {g: n for g, n in d.gesture_names.items() if g not in excluded}
    return replace(d, trials=tuple(trials), gesture_names=gesture_names)


# ============================================================================
# Validation
# ============================================================================

def validate(d: Dataset) -> list[Violation]:
    """One Violation per broken invariant; empty list means well-formed."""
    violations: list[Violation] = []

    counts = Counter(t.key for t in d.trials)
    for key, n in counts.items():
        if n > 1:
            violations.append(Violation(key, f"duplicate key ({n} trials)"))

    for t in d.trials:
        key = t.key
        if t.repetition < 1:
            violations.append(Violation(key, "repetition must be >= 1"))
        if t.gesture_id not in d.gesture_names:
            violations.append(Violation(key, f"gesture {t.gesture_id} has no name"))
        if t.position_id is not None and t.position_id not in d.position_names:
            violations.append(Violation(key, f"position {t.position_id} has no name"))
        if not t.streams:
            violations.append(Violation(key, "no streams"))
            continue

        modalities = Counter(s.modality for s in t.streams)
        for modality, n in modalities.items():
            if n > 1:
                violations.append(Violation(key, f"{n} {modality.value} streams"))

        for s in t.streams:
            if s.sample_rate_hz <= 0:
                violations.append(Violation(key, f"{s.modality.value}: sample rate must be > 0"))
                continue
            if s.samples.ndim != 2 or s.samples.shape[0] < 1 or s.samples.shape[1] < 1:
                violations.append(Violation(key, f"{s.modality.value}: empty or malformed samples"))
                continue
            if not np.all(np.isfinite(s.samples)):
                violations.append(Violation(key, f"{s.modality.value}: non-finite sample values"))

        rates = [s.sample_rate_hz for s in t.streams if s.sample_rate_hz > 0 and s.samples.ndim == 2]
        if len(rates) > 1:
            slowest_period = 1.0 / min(rates)
            durations = [s.duration_s for s in t.streams if s.sample_rate_hz > 0 and s.samples.ndim == 2]
            if max(durations) - min(durations) > slowest_period + 1e-9:
                violations.append(Violation(key, "stream durations differ by more than one sample period"))

    return violations


def _raise_on_violations(d: Dataset) -> None:
    violations = validate(d)
    if violations:
        shown = "; ".join(str(v) for v in violations[:3])
        more = f" (+{len(violations) - 3} more)" if len(violations) > 3 else ""
        raise BundleError(f"{shown}{more}")


# ============================================================================
# Bundle I/O
# ============================================================================

def _stream_filename(key: TrialKey, modality: ModalityKind, encoding: str) -> str:
    suffix = "csv" if encoding == "csv" else "f32"
    return f"trials/{key.label()}_{modality.value}.{suffix}"


def _write_stream(path: Path, samples: np.ndarray, encoding: str) -> None:
    if encoding == "csv":
        # one row per sample, one column per channel; %.17g round-trips float64
        frame = pd.DataFrame(samples.T)
        frame.to_csv(path, header=False, index=False, float_format="%.17g", lineterminator="\n")
    else:
        np.ascontiguousarray(samples.T, dtype="<f4").tofile(path)


def _read_stream(path: Path, channels: int, n_samples: int, encoding: str, where: str) -> np.ndarray:
    if not path.is_file():
        raise BundleError(f"{where}: missing stream file {path.name}")

    if encoding == "csv":
        try:
            frame = pd.read_csv(path, header=None, dtype=np.float64, float_precision="round_trip")
        except pd.errors.EmptyDataError:
            raise BundleError(f"{where}: empty stream file {path.name}") from None
        except ValueError as e:
            raise BundleError(f"{where}: unparseable stream file {path.name}: {e}") from None
        data = frame.to_numpy()
    else:
        raw = np.fromfile(path, dtype="<f4")
        if raw.size % channels:
            raise BundleError(f"{where}: channel mismatch, {raw.size} values not divisible by {channels}")
        data = raw.reshape(-1, channels).astype(np.float64)

    if data.shape[1] != channels:
        raise BundleError(
            f"{where}: channel mismatch, manifest declares {channels} but file has {data.shape[1]} columns"
        )
    if data.shape[0] != n_samples:
        raise BundleError(
            f"{where}: sample count mismatch, manifest declares {n_samples} but file has {data.shape[0]}"
        )
    if not np.all(np.isfinite(data)):
        raise BundleError(f"{where}: non-finite sample values")
    return np.ascontiguousarray(data.T)


def load_bundle(path: str | Path) -> Dataset:
    """
    Load a canonical bundle directory.

    Args:
        path: bundle directory containing manifest.json

    Returns:
        Dataset: validated dataset matching the manifest exactly
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleError(f"missing manifest: {manifest_path}")

    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise BundleError(f"invalid manifest JSON: {e}") from None

    encoding = manifest.get("encoding", "csv")
    if encoding not in ENCODINGS:
        raise BundleError(f"unknown encoding {encoding!r}")

    try:
        gesture_names = {int(k): str(v) for k, v in manifest["gesture_names"].items()}
        position_names = {int(k): str(v) for k, v in manifest.get("position_names", {}).items()}
        entries = manifest["trials"]
    except (KeyError, AttributeError, ValueError) as e:
        raise BundleError(f"malformed manifest: {e}") from None

    trials = []
    seen: set[TrialKey] = set()
    for entry in entries:
        try:
            key = TrialKey(
                int(entry["subject"]),
                int(entry["gesture"]),
                None if entry.get("position") is None else int(entry["position"]),
                int(entry["repetition"]),
            )
            stream_entries = entry["streams"]
        except (KeyError, TypeError, ValueError) as e:
            raise BundleError(f"malformed trial entry: {e}") from None

        if key in seen:
            raise BundleError(f"{key.label()}: duplicate trial key")
        seen.add(key)

        streams = []
        for s in stream_entries:
            try:
                modality = ModalityKind(s["modality"])
                channels = int(s["channels"])
                rate = float(s["sample_rate_hz"])
                n_samples = int(s["samples"])
                file = s["file"]
            except (KeyError, TypeError, ValueError) as e:
                raise BundleError(f"{key.label()}: malformed stream entry: {e}") from None
            samples = _read_stream(root / file, channels, n_samples, encoding, key.label())
            streams.append(SignalStream(modality, rate, samples))

        trials.append(TrialRecord(key.subject, key.gesture, key.position, key.repetition, tuple(streams)))

    dataset = Dataset(str(manifest.get("name", root.name)), tuple(trials), gesture_names, position_names)
    _raise_on_violations(dataset)
    logger.debug("Loaded %s: %d trials from %s", dataset.name, len(trials), root)
    return dataset


def save_bundle(
    d: Dataset,
    path: str | Path,
    encoding: str = "csv",
    provenance: Optional[dict] = None,
) -> None:
    """
    Write a dataset as a canonical bundle. Output bytes depend only on the
    arguments (no timestamps), so identical inputs give identical bundles.
    """
    if encoding not in ENCODINGS:
        raise BundleError(f"unknown encoding {encoding!r}")
    _raise_on_violations(d)

    root = Path(path)
    (root / "trials").mkdir(parents=True, exist_ok=True)

    entries = []
    for t in d.trials:
        stream_entries = []
        for s in t.streams:
            file = _stream_filename(t.key, s.modality, encoding)
            _write_stream(root / file, s.samples, encoding)
            stream_entries.append({
                "modality": s.modality.value,
                "channels": s.channel_count,
                "sample_rate_hz": s.sample_rate_hz,
                "file": file,
                "samples": s.n_samples,
            })
        entries.append({
            "subject": t.subject_id,
            "gesture": t.gesture_id,
            "position": t.position_id,
            "repetition": t.repetition,
            "streams": stream_entries,
        })

    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "name": d.name,
        "encoding": encoding,
        "gesture_names": {str(k): v for k, v in sorted(d.gesture_names.items())},
        "position_names": {str(k): v for k, v in sorted(d.position_names.items())},
        "provenance": provenance or {},
        "trials": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    logger.debug("Wrote %d trials to %s (%s)", len(entries), root, encoding)


def read_provenance(path: str | Path) -> dict:
    """Provenance block of a bundle manifest (empty when absent)."""
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleError(f"missing manifest: {manifest_path}")
    return json.loads(manifest_path.read_text()).get("provenance", {})


# ============================================================================
# Conversion contract
# ============================================================================

INDEX_COLUMNS = ["subject", "gesture", "position", "repetition", "modality", "sample_rate_hz", "file"]


def convert_index(index_csv: str | Path, names_json: str | Path, name: Optional[str] = None) -> Dataset:
    """
    Assemble a Dataset from an externally converted recording table.

    The index CSV has one row per (trial, stream) with columns subject,
    gesture, position (blank = unspecified), repetition, modality,
    sample_rate_hz, file; each file is a headerless CSV with one column per
    channel. names_json holds {"gesture_names": {...}, "position_names": {...}}.
    """
    index_path = Path(index_csv)
    try:
        index = pd.read_csv(index_path, dtype={"position": "Int64"})
        names = json.loads(Path(names_json).read_text())
    except (OSError, ValueError) as e:
        raise BundleError(f"cannot read conversion inputs: {e}") from None

    missing = [c for c in INDEX_COLUMNS if c not in index.columns]
    if missing:
        raise BundleError(f"index is missing columns: {missing}")

    trials = []
    group_keys = ["subject", "gesture", "position", "repetition"]
    for keys, rows in index.groupby(group_keys, dropna=False, sort=True):
        subject, gesture, position, repetition = keys
        try:
            position = None if pd.isna(position) else int(position)
            key = TrialKey(int(subject), int(gesture), position, int(repetition))
        except (TypeError, ValueError) as e:
            raise BundleError(f"malformed index labels {keys}: {e}") from None
        streams = []
        for row in rows.itertuples(index=False):
            try:
                modality = ModalityKind(row.modality)
                rate = float(row.sample_rate_hz)
            except (KeyError, TypeError, ValueError) as e:
                raise BundleError(f"{key.label()}: malformed index row: {e}") from None
            file = index_path.parent / row.file
            try:
                frame = pd.read_csv(file, header=None, dtype=np.float64, float_precision="round_trip")
            except (OSError, ValueError) as e:
                raise BundleError(f"{key.label()}: cannot read {file}: {e}") from None
            streams.append(SignalStream(modality, rate, np.ascontiguousarray(frame.to_numpy().T)))
        trials.append(TrialRecord(key.subject, key.gesture, key.position, key.repetition, tuple(streams)))

    dataset = Dataset(
        name or index_path.stem,
        tuple(trials),
        {int(k): str(v) for k, v in names.get("gesture_names", {}).items()},
        {int(k): str(v) for k, v in names.get("position_names", {}).items()},
    )
    _raise_on_violations(dataset)
    return dataset
