"""
Per-window feature extraction: EMG TD and TDPSD, ACC MED and RMS.

Every feature function works along the last axis, so it accepts a single
window vector (returns a scalar) or a stack of windows (returns an array).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from config import STORE_INDEX_NAME, TDPSD_EPSILON, TDPSD_LAMBDA, TDPSD_VERSION
from dataset_model import Dataset, GestureSubset, ModalityKind, TrialRecord
from errors import FeatureError, SubsetError
from preprocessing import Window, WindowSpec, segment_windows
from workers import run_parallel

logger = logging.getLogger(__name__)

LABEL_COLUMNS = ["subject", "gesture", "position", "repetition", "window", "window_start_s"]
PAIR_KEYS = ["subject", "gesture", "position", "repetition", "window"]


class FeatureSetKind(Enum):
    TD = "emg-td"
    TDPSD = "emg-tdpsd"
    MED = "acc-med"
    RMS = "acc-rms"

    @property
    def modality(self) -> ModalityKind:
        return ModalityKind.EMG if self in (FeatureSetKind.TD, FeatureSetKind.TDPSD) else ModalityKind.ACC

    @property
    def feature_names(self) -> tuple[str, ...]:
        return _FEATURE_NAMES[self]

    @property
    def title(self) -> str:
        """Display name, e.g. "EMG TD"."""
        modality, name = self.value.split("-")
        return f"{modality.upper()} {name.upper()}"

    @classmethod
    def parse(cls, text: str) -> "FeatureSetKind":
        normalized = text.strip().lower().replace("_", "-").replace(" ", "-")
        for kind in cls:
            if normalized in (kind.value, kind.name.lower()):
                return kind
        raise FeatureError(f"unknown feature set {text!r} (expected one of {[k.value for k in cls]})")


_FEATURE_NAMES = {
    FeatureSetKind.TD: ("mav", "zc", "ssc", "wl"),
    FeatureSetKind.TDPSD: ("psd1", "psd2", "psd3", "psd4", "psd5", "psd6"),
    FeatureSetKind.MED: ("med",),
    FeatureSetKind.RMS: ("rms",),
}


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    kind: FeatureSetKind
    subject: int
    gesture: int
    position: Optional[int]
    repetition: int
    window_start_s: float


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows of one feature set with per-row label provenance."""

    kind: FeatureSetKind
    values: np.ndarray
    labels: pd.DataFrame = field(repr=False)
    columns: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise FeatureError("feature values must be a 2-D array")
        if self.values.shape[0] != len(self.labels):
            raise FeatureError(f"{self.values.shape[0]} rows but {len(self.labels)} label rows")
        if self.columns and len(self.columns) != self.values.shape[1]:
            raise FeatureError(f"{self.values.shape[1]} columns but {len(self.columns)} descriptors")

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def has_positions(self) -> bool:
        return bool(self.labels["position"].notna().any())

    def column(self, name: str) -> np.ndarray:
        """Integer label column; positions must be present for "position"."""
        series = self.labels[name]
        if series.isna().any():
            raise FeatureError(f"label column {name!r} has missing values")
        return series.to_numpy(dtype=np.int64)

    def row(self, i: int) -> FeatureVector:
        lab = self.labels.iloc[i]
        position = None if pd.isna(lab["position"]) else int(lab["position"])
        return FeatureVector(self.values[i], self.kind, int(lab["subject"]), int(lab["gesture"]),
                             position, int(lab["repetition"]), float(lab["window_start_s"]))

    @property
    def rows(self) -> list[FeatureVector]:
        return [self.row(i) for i in range(self.n_rows)]

    def select(self, index: np.ndarray) -> "FeatureMatrix":
        """Rows at an index array or boolean mask, order preserved."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return FeatureMatrix(self.kind, self.values[index],
                             self.labels.iloc[index].reset_index(drop=True), self.columns)

    def subjects(self) -> list[int]:
        return sorted(int(s) for s in self.labels["subject"].unique())

    def for_subject(self, subject: int) -> "FeatureMatrix":
        return self.select(self.labels["subject"].to_numpy() == subject)

    def pair_rows(self, other: "FeatureMatrix") -> "FeatureMatrix":
        """Reorder `other` so row i carries the same window as row i of self."""
        left = self.labels[PAIR_KEYS].fillna({"position": -1}).astype(np.int64)
        right = other.labels[PAIR_KEYS].fillna({"position": -1}).astype(np.int64)
        right["_row"] = np.arange(len(right))
        if right.duplicated(PAIR_KEYS).any():
            raise FeatureError(f"{other.kind.value}: duplicate window keys")
        merged = left.merge(right, on=PAIR_KEYS, how="left", sort=False)
        missing = merged["_row"].isna()
        if missing.any():
            raise FeatureError(
                f"{other.kind.value} has no row for {int(missing.sum())} {self.kind.value} windows"
            )
        return other.select(merged["_row"].to_numpy(dtype=np.int64))

    @classmethod
    def concat(cls, matrices: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        if not matrices:
            raise FeatureError("nothing to concatenate")
        kinds = {m.kind for m in matrices}
        dims = {m.dim for m in matrices}
        if len(kinds) != 1 or len(dims) != 1:
            raise FeatureError("cannot concatenate matrices of different kind or dimension")
        return cls(
            matrices[0].kind,
            np.vstack([m.values for m in matrices]),
            pd.concat([m.labels for m in matrices], ignore_index=True),
            matrices[0].columns,
        )


# ============================================================================
# Feature functions
# ============================================================================

def _as_windows(x, min_length: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] < min_length:
        raise FeatureError(f"{name} needs at least {min_length} samples")
    return arr


def _scalar(result: np.ndarray, as_int: bool = False):
    if np.ndim(result) == 0:
        return int(result) if as_int else float(result)
    return result


def mav(x) -> float:
    """Mean absolute value."""
    arr = _as_windows(x, 1, "mav")
    return _scalar(np.mean(np.abs(arr), axis=-1))


def zero_crossings(x, eps: float = 0.0) -> int:
    """Sign changes between neighbours whose difference reaches eps."""
    arr = _as_windows(x, 2, "zero_crossings")
    signs = np.sign(arr)
    crossed = (signs[..., :-1] != signs[..., 1:]) & (np.abs(arr[..., :-1] - arr[..., 1:]) >= eps)
    return _scalar(np.count_nonzero(crossed, axis=-1), as_int=True)


def slope_sign_changes(x, eps: float = 0.0) -> int:
    """Local extrema whose larger neighbour difference reaches eps."""
    arr = _as_windows(x, 3, "slope_sign_changes")
    left = arr[..., 1:-1] - arr[..., :-2]
    right = arr[..., 1:-1] - arr[..., 2:]
    changed = (left * right > 0) & (np.maximum(np.abs(left), np.abs(right)) >= eps)
    return _scalar(np.count_nonzero(changed, axis=-1), as_int=True)


def waveform_length(x) -> float:
    """Cumulative absolute first difference."""
    arr = _as_windows(x, 2, "waveform_length")
    return _scalar(np.sum(np.abs(np.diff(arr, axis=-1)), axis=-1))


def _tdpsd_descriptors(arr: np.ndarray) -> np.ndarray:
    eps, lam = TDPSD_EPSILON, TDPSD_LAMBDA
    d1 = np.diff(arr, axis=-1)
    d2 = np.diff(d1, axis=-1)

    m0 = np.sqrt(np.sum(arr ** 2, axis=-1))
    m2 = np.sqrt(np.sum(d1 ** 2, axis=-1))
    m4 = np.sqrt(np.sum(d2 ** 2, axis=-1))
    m0, m2, m4 = (m ** lam / lam for m in (m0, m2, m4))

    f1 = np.log(m0 + eps)
    f2 = np.log(np.abs(m0 - m2) + eps)
    f3 = np.log(np.abs(m0 - m4) + eps)
    f4 = np.log(m0 / np.sqrt(np.abs((m0 - m2) * (m0 - m4)) + eps) + eps)
    f5 = np.log(m2 / np.sqrt(m0 * m4 + eps) + eps)
    f6 = np.log((np.sum(np.abs(d1), axis=-1) + eps) / (np.sum(np.abs(d2), axis=-1) + eps))
    return np.stack([f1, f2, f3, f4, f5, f6], axis=-1)


def tdpsd(x) -> np.ndarray:
    """
    Six time-domain power spectral descriptors (definition tdpsd-v1).

    Root moments of the window and its first/second differences are
    power-normalized (m**0.1 / 0.1) and combined into six log descriptors.
    The same descriptors of log(x**2 + eps) are fused with the raw ones by
    -2ab / (a**2 + b**2 + eps), which bounds each output to [-1, 1]. eps
    floors every log argument so silent windows stay finite.

    Returns:
        np.ndarray: shape (..., 6)
    """
    arr = _as_windows(x, 3, "tdpsd")
    eps = TDPSD_EPSILON
    a = _tdpsd_descriptors(arr)
    b = _tdpsd_descriptors(np.log(arr ** 2 + eps))
    return -2.0 * a * b / (a ** 2 + b ** 2 + eps)


def acc_median(x) -> float:
    arr = _as_windows(x, 1, "acc_median")
    return _scalar(np.median(arr, axis=-1))


def acc_rms(x) -> float:
    arr = _as_windows(x, 1, "acc_rms")
    return _scalar(np.sqrt(np.mean(arr ** 2, axis=-1)))


def _feature_block(stack: np.ndarray, kind: FeatureSetKind, eps: float) -> np.ndarray:
    """(windows, channels, L) -> (windows, channels, n_features)."""
    if kind is FeatureSetKind.TD:
        return np.stack([
            mav(stack),
            zero_crossings(stack, eps).astype(np.float64),
            slope_sign_changes(stack, eps).astype(np.float64),
            waveform_length(stack),
        ], axis=-1)
    if kind is FeatureSetKind.TDPSD:
        return tdpsd(stack)
    if kind is FeatureSetKind.MED:
        return acc_median(stack)[..., None]
    return acc_rms(stack)[..., None]


def column_names(kind: FeatureSetKind, channels: int) -> tuple[str, ...]:
    """Channel-major column descriptors ch{c}_{feature}."""
    return tuple(f"ch{c}_{name}" for c in range(channels) for name in kind.feature_names)


def _labels_for(windows: Sequence[Window]) -> pd.DataFrame:
    return pd.DataFrame({
        "subject": np.array([w.trial_key.subject for w in windows], dtype=np.int64),
        "gesture": np.array([w.trial_key.gesture for w in windows], dtype=np.int64),
        "position": pd.array([w.trial_key.position for w in windows], dtype="Int64"),
        "repetition": np.array([w.trial_key.repetition for w in windows], dtype=np.int64),
        "window": np.array([w.index for w in windows], dtype=np.int64),
        "window_start_s": np.array([w.start_time_s for w in windows], dtype=np.float64),
    })


def extract(
    windows: Sequence[Window],
    kind: FeatureSetKind,
    eps: float = 0.0,
    allow_mismatch: bool = False,
) -> FeatureMatrix:
    """
    One feature row per window, features concatenated channel-major.

    Args:
        windows: windows of one modality with identical channel count and length
        kind: feature set
        eps: ZC/SSC dead-zone threshold
        allow_mismatch: extract even if the modality does not match the kind

    Returns:
        FeatureMatrix: row k belongs to windows[k]
    """
    if not windows:
        raise FeatureError("no windows to extract features from")

    modalities = {w.modality for w in windows}
    if len(modalities) != 1:
        raise FeatureError("windows mix modalities")
    modality = modalities.pop()
    if modality is not kind.modality and not allow_mismatch:
        raise FeatureError(f"{kind.value} expects {kind.modality.value} windows, got {modality.value}")

    shapes = {w.samples.shape for w in windows}
    if len({s[0] for s in shapes}) != 1:
        raise FeatureError("windows have heterogeneous channel counts")
    if len(shapes) != 1:
        raise FeatureError("windows have heterogeneous lengths")

    stack = np.stack([w.samples for w in windows])
    block = _feature_block(stack, kind, eps)
    values = block.reshape(block.shape[0], -1)
    if not np.all(np.isfinite(values)):
        raise FeatureError(f"{kind.value}: non-finite feature values")

    channels = stack.shape[1]
    return FeatureMatrix(kind, values, _labels_for(windows), column_names(kind, channels))


def extract_trial(
    trial: TrialRecord,
    w: WindowSpec,
    kinds: Iterable[FeatureSetKind],
    eps: float = 0.0,
) -> dict[FeatureSetKind, FeatureMatrix]:
    windows = segment_windows(trial, w)
    out = {}
    for kind in kinds:
        if kind.modality not in windows:
            raise FeatureError(f"{trial.key.label()}: no {kind.modality.value} stream for {kind.value}")
        out[kind] = extract(windows[kind.modality], kind, eps)
    return out


def extract_dataset(
    d: Dataset,
    w: WindowSpec,
    kinds: Sequence[FeatureSetKind],
    eps: float = 0.0,
    jobs: int = 1,
    progress_callback=None,
) -> dict[FeatureSetKind, FeatureMatrix]:
    """Feature matrices over all trials, rows in trial order then window order."""
    per_trial = run_parallel(
        lambda t: extract_trial(t, w, kinds, eps),
        d.trials,
        jobs=jobs,
        progress_callback=progress_callback,
    )
    return {kind: FeatureMatrix.concat([m[kind] for m in per_trial]) for kind in kinds}


# ============================================================================
# Feature store
# ============================================================================

@dataclass
class FeatureStore:
    name: str
    gesture_names: dict[int, str]
    position_names: dict[int, str]
    matrices: dict[FeatureSetKind, FeatureMatrix]
    window: WindowSpec = field(default_factory=WindowSpec)
    provenance: dict = field(default_factory=dict)
    subset: Optional[str] = None

    @property
    def has_positions(self) -> bool:
        return any(m.has_positions for m in self.matrices.values())

    def matrix(self, kind: FeatureSetKind) -> FeatureMatrix:
        if kind not in self.matrices:
            raise FeatureError(f"feature store has no {kind.value} features")
        return self.matrices[kind]

    def keep_gestures(self, gesture_ids: Iterable[int]) -> "FeatureStore":
        ids = set(int(g) for g in gesture_ids)
        matrices = {
            k: m.select(m.labels["gesture"].isin(ids).to_numpy()) for k, m in self.matrices.items()
        }
        names = {g: n for g, n in self.gesture_names.items() if g in ids}
        return FeatureStore(self.name, names, self.position_names, matrices, self.window,
                            self.provenance, self.subset)

    def apply_subset(self, s: GestureSubset) -> "FeatureStore":
        missing = sorted(set(s.gesture_ids) - set(self.gesture_names))
        if missing:
            raise SubsetError(f"subset {s.name} references gesture ids absent from {self.name}: {missing}")
        store = self.keep_gestures(s.gesture_ids)
        store.subset = s.name
        return store

    def exclude(self, names: Iterable[str]) -> "FeatureStore":
        names = set(names)
        excluded = sorted(n for n in self.gesture_names.values() if n in names)
        if not excluded:
            return self
        logger.info("Excluding gestures %s", excluded)
        return self.keep_gestures(g for g, n in self.gesture_names.items() if n not in names)


def _comment_header(provenance: dict) -> str:
    return (
        f"# tdpsd_definition={TDPSD_VERSION}\n"
        f"# run_config={json.dumps(provenance.get('run_config', {}), sort_keys=True)}\n"
    )


def write_feature_store(
    matrices: dict[FeatureSetKind, FeatureMatrix],
    out_dir: str | Path,
    dataset: "Dataset | FeatureStore",
    window: WindowSpec,
    provenance: Optional[dict] = None,
) -> list[Path]:
    """
    One CSV per (subject, kind) plus store.json. Label columns come first,
    then feature columns ch{c}_{feat}; every CSV starts with a comment header.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    provenance = provenance or {}
    header = _comment_header(provenance)

    written = []
    files: dict[str, dict[str, str]] = {}
    for kind, matrix in matrices.items():
        for subject in matrix.subjects():
            part = matrix.for_subject(subject)
            frame = pd.concat(
                [part.labels, pd.DataFrame(part.values, columns=list(part.columns))], axis=1
            )
            path = out / f"subject{subject:02d}_{kind.value}.csv"
            with path.open("w", newline="") as f:
                f.write(header)
                frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
            files.setdefault(str(subject), {})[kind.value] = path.name
            written.append(path)

    index = {
        "dataset": dataset.name,
        "gesture_names": {str(k): v for k, v in sorted(dataset.gesture_names.items())},
        "position_names": {str(k): v for k, v in sorted(dataset.position_names.items())},
        "kinds": [k.value for k in matrices],
        "window": {"length_ms": window.length_ms, "increment_ms": window.increment_ms},
        "files": files,
        "tdpsd_definition": TDPSD_VERSION,
        **provenance,
    }
    (out / STORE_INDEX_NAME).write_text(json.dumps(index, indent=2) + "\n")
    return written


def load_feature_store(path: str | Path, kinds: Optional[Iterable[FeatureSetKind]] = None) -> FeatureStore:
    """Read a feature store; optionally only some kinds."""
    root = Path(path)
    index_path = root / STORE_INDEX_NAME
    if not index_path.is_file():
        raise FeatureError(f"not a feature store (missing {STORE_INDEX_NAME}): {root}")
    index = json.loads(index_path.read_text())

    available = [FeatureSetKind.parse(k) for k in index["kinds"]]
    wanted = available if kinds is None else list(kinds)
    for kind in wanted:
        if kind not in available:
            raise FeatureError(f"feature store {root} has no {kind.value} features")

    matrices = {}
    subjects = sorted(index["files"], key=int)
    for kind in wanted:
        parts = []
        for subject in subjects:
            file = root / index["files"][subject][kind.value]
            frame = pd.read_csv(file, comment="#", dtype={"position": "Int64"},
                                float_precision="round_trip")
            feature_cols = [c for c in frame.columns if c not in LABEL_COLUMNS]
            parts.append(FeatureMatrix(
                kind,
                frame[feature_cols].to_numpy(dtype=np.float64),
                frame[LABEL_COLUMNS].reset_index(drop=True),
                tuple(feature_cols),
            ))
        matrices[kind] = FeatureMatrix.concat(parts)

    window = WindowSpec(**index.get("window", {}))
    provenance = {k: index[k] for k in ("run_config", "stage") if k in index}
    return FeatureStore(
        index["dataset"],
        {int(k): v for k, v in index["gesture_names"].items()},
        {int(k): v for k, v in index["position_names"].items()},
        matrices,
        window,
        provenance,
    )
