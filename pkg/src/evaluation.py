"""
Within-subject leave-one-repetition-out evaluation.

Three tasks run over a feature store:
    position     - classify limb position from all gestures pooled
    gesture      - classify gestures inside each position (pooled per fold)
    sequential   - predict position, then dispatch to that position's gesture model

Every (subject, fold) cell is independent and seeded from its coordinates,
so results do not depend on --jobs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from classifiers import ClassifierSpec, TrainedModel, fit, predict_batch
from config import EXACT_WILCOXON_MAX_N, SIGNIFICANCE_ALPHA, TDPSD_VERSION
from errors import EvaluationError, TaskUnavailableError
from features import FeatureMatrix, FeatureSetKind, FeatureStore
from workers import derive_seed, run_parallel

logger = logging.getLogger(__name__)

MIN_PAIRED_SUBJECTS = 6

# seed coordinate tags, one per model role inside a cell
_GESTURE_MODEL = 0
_POSITION_GESTURE_MODEL = 1
_POSITION_MODEL = 2


class TaskKind(Enum):
    POSITION = "position"
    WITHIN_POSITION = "gesture"
    SEQUENTIAL = "sequential"

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        normalized = text.strip().lower().replace("_", "-")
        if normalized == "within-position":
            return cls.WITHIN_POSITION
        try:
            return cls(normalized)
        except ValueError:
            raise EvaluationError(f"unknown task {text!r} (expected position, gesture, sequential)") from None


# ============================================================================
# Folds
# ============================================================================

@dataclass(frozen=True)
class Fold:
    repetition: int
    train_index: np.ndarray
    test_index: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    subject_id: int
    folds: tuple[Fold, ...]


def make_loto_folds(rows: FeatureMatrix, subject_id: Optional[int] = None) -> FoldPlan:
    """
    One fold per repetition id of one subject.

    Indices refer to rows of `rows`; the held-out repetition covers every
    gesture and every position of that repetition.
    """
    subjects = rows.subjects()
    if subject_id is None:
        if len(subjects) != 1:
            raise EvaluationError(f"fold planning needs rows of one subject, got {subjects}")
        subject_id = subjects[0]
    mask = rows.labels["subject"].to_numpy() == subject_id
    reps = rows.column("repetition")
    repetitions = sorted(set(reps[mask].tolist()))
    if len(repetitions) < 2:
        raise EvaluationError(
            f"subject {subject_id}: leave-one-repetition-out needs >= 2 repetitions, got {repetitions}"
        )

    folds = tuple(
        Fold(r, np.flatnonzero(mask & (reps != r)), np.flatnonzero(mask & (reps == r)))
        for r in repetitions
    )
    return FoldPlan(int(subject_id), folds)


# ============================================================================
# Results
# ============================================================================

@dataclass(frozen=True)
class FoldOutcome:
    """Per-window predictions of one (subject, held-out repetition) cell."""

    subject: int
    repetition: int
    test_index: np.ndarray
    truth: np.ndarray
    predicted: np.ndarray

    @property
    def n_correct(self) -> int:
        return int(np.sum(self.truth == self.predicted))

    @property
    def n_total(self) -> int:
        return int(self.truth.shape[0])

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_total if self.n_total else 0.0


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[int, ...]
    counts: np.ndarray
    percent: np.ndarray
    empty_rows: tuple[int, ...]


def confusion_matrix(truths, predictions, classes: Sequence[int]) -> ConfusionMatrix:
    """Row-normalized percentages; empty rows stay all-zero and are listed in empty_rows."""
    truths = np.asarray(truths, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if truths.shape != predictions.shape:
        raise EvaluationError(f"{truths.shape[0]} truths but {predictions.shape[0]} predictions")

    classes = tuple(int(c) for c in classes)
    lookup = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(truths.tolist()) - set(classes) | set(predictions.tolist()) - set(classes))
    if unknown:
        raise EvaluationError(f"labels {unknown} are not in the class list {list(classes)}")

    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    if truths.size:
        rows = np.array([lookup[t] for t in truths.tolist()])
        cols = np.array([lookup[p] for p in predictions.tolist()])
        np.add.at(counts, (rows, cols), 1)

    totals = counts.sum(axis=1, keepdims=True)
    percent = np.divide(100.0 * counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    empty = tuple(c for c, t in zip(classes, totals[:, 0]) if t == 0)
    return ConfusionMatrix(classes, counts, percent, empty)


@dataclass(frozen=True)
class TaskResult:
    task: TaskKind
    features: tuple[str, ...]
    classifier: str
    outcomes: tuple[FoldOutcome, ...]
    classes: tuple[int, ...]
    gesture_classifier: Optional[str] = None
    class_names: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    oracle: bool = False

    @property
    def subjects(self) -> list[int]:
        return sorted({o.subject for o in self.outcomes})

    def fold_accuracies(self, subject: int) -> dict[int, float]:
        return {o.repetition: o.accuracy for o in self.outcomes if o.subject == subject}

    @property
    def subject_means(self) -> dict[int, float]:
        return {s: float(np.mean(list(self.fold_accuracies(s).values()))) for s in self.subjects}

    @property
    def mean(self) -> float:
        """Mean over all subjects and folds."""
        return float(np.mean([o.accuracy for o in self.outcomes]))

    @property
    def std(self) -> float:
        """Standard deviation of per-subject means (ddof=1; 0 for one subject)."""
        means = list(self.subject_means.values())
        return float(np.std(means, ddof=1)) if len(means) > 1 else 0.0

    def confusion(self) -> ConfusionMatrix:
        truth = np.concatenate([o.truth for o in self.outcomes])
        predicted = np.concatenate([o.predicted for o in self.outcomes])
        return confusion_matrix(truth, predicted, self.classes)

    @property
    def stem(self) -> str:
        """File stem, e.g. sequential_acc-med+emg-td_lda."""
        return f"{self.task.value}_{'+'.join(self.features)}_{self.classifier.replace(':', '-')}"

    def to_dict(self) -> dict:
        cm = self.confusion()
        return {
            "task": self.task.value,
            "features": list(self.features),
            "classifier": self.classifier,
            "gesture_classifier": self.gesture_classifier,
            "oracle": self.oracle,
            "mean": self.mean,
            "std": self.std,
            "subjects": {
                str(s): {"mean": m, "folds": {str(r): a for r, a in sorted(self.fold_accuracies(s).items())}}
                for s, m in self.subject_means.items()
            },
            "classes": list(self.classes),
            "class_names": {str(c): self.class_names.get(c, str(c)) for c in self.classes},
            "confusion": {
                "counts": cm.counts.tolist(),
                "percent": cm.percent.tolist(),
                "empty_rows": list(cm.empty_rows),
            },
            "folds": [
                {
                    "subject": o.subject,
                    "repetition": o.repetition,
                    "accuracy": o.accuracy,
                    "rows": o.test_index.tolist(),
                    "truth": o.truth.tolist(),
                    "predicted": o.predicted.tolist(),
                }
                for o in self.outcomes
            ],
            "tdpsd_definition": TDPSD_VERSION,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskResult":
        outcomes = tuple(
            FoldOutcome(
                int(f["subject"]),
                int(f["repetition"]),
                np.asarray(f["rows"], dtype=np.int64),
                np.asarray(f["truth"], dtype=np.int64),
                np.asarray(f["predicted"], dtype=np.int64),
            )
            for f in data["folds"]
        )
        return cls(
            TaskKind.parse(data["task"]),
            tuple(data["features"]),
            data["classifier"],
            outcomes,
            tuple(int(c) for c in data["classes"]),
            data.get("gesture_classifier"),
            {int(k): v for k, v in data.get("class_names", {}).items()},
            data.get("config", {}),
            bool(data.get("oracle", False)),
        )


def write_result(result: TaskResult, out_dir: Union[str, Path]) -> list[Path]:
    """<stem>.json with full per-fold detail plus <stem>_confusion.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{result.stem}.json"
    json_path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")

    cm = result.confusion()
    names = [result.class_names.get(c, str(c)) for c in cm.classes]
    frame = pd.DataFrame(np.round(cm.percent, 1), index=names, columns=names)
    frame.index.name = "true\\predicted"
    csv_path = out / f"{result.stem}_confusion.csv"
    with csv_path.open("w", newline="") as f:
        f.write(f"# tdpsd_definition={TDPSD_VERSION}\n")
        f.write(f"# run_config={json.dumps(result.config, sort_keys=True)}\n")
        frame.to_csv(f, lineterminator="\n")
    return [json_path, csv_path]


def load_result(path: Union[str, Path]) -> TaskResult:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise EvaluationError(f"cannot read result {path}: {e}") from None
    return TaskResult.from_dict(data)


# ============================================================================
# Tasks
# ============================================================================

def train_fold_model(
    values: np.ndarray,
    targets: np.ndarray,
    train_index: np.ndarray,
    spec: ClassifierSpec,
    seed: int,
) -> TrainedModel:
    """The only fitting path of every task: sees the training rows and nothing else."""
    return fit(spec, values[train_index], targets[train_index], seed=seed)


def _as_spec(classifier: Union[str, ClassifierSpec]) -> ClassifierSpec:
    return classifier if isinstance(classifier, ClassifierSpec) else ClassifierSpec.parse(classifier)


def _require_positions(matrix: FeatureMatrix) -> None:
    if not matrix.has_positions or matrix.labels["position"].isna().any():
        raise TaskUnavailableError("task unavailable: no position labels")


def _cells(matrix: FeatureMatrix) -> list[tuple[int, Fold]]:
    cells = []
    for subject in matrix.subjects():
        plan = make_loto_folds(matrix, subject)
        cells.extend((subject, fold) for fold in plan.folds)
    return cells


def _outcome(subject: int, fold: Fold, index: np.ndarray, truth: np.ndarray, predicted: np.ndarray) -> FoldOutcome:
    order = np.argsort(index, kind="stable")
    return FoldOutcome(subject, fold.repetition, index[order], truth[order], predicted[order])


def _within_position_predictions(
    values: np.ndarray,
    gestures: np.ndarray,
    positions: np.ndarray,
    train_index: np.ndarray,
    routed_test: dict[int, np.ndarray],
    spec: ClassifierSpec,
    seed: int,
    subject: int,
    repetition: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit one gesture model per routed position; returns (test rows, predictions)."""
    rows, preds = [], []
    for position, test in sorted(routed_test.items()):
        if test.size == 0:
            continue
        train = train_index[positions[train_index] == position]
        model = train_fold_model(values, gestures, train, spec,
                                 derive_seed(seed, subject, repetition, _POSITION_GESTURE_MODEL, position))
        rows.append(test)
        preds.append(predict_batch(model, values[test]))
    if not rows:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(rows), np.concatenate(preds)


def run_position_task(
    matrix: FeatureMatrix,
    classifier: Union[str, ClassifierSpec],
    seed: int = 0,
    jobs: int = 1,
    progress_callback=None,
) -> TaskResult:
    """Position classification with all gestures pooled."""
    _require_positions(matrix)
    spec = _as_spec(classifier)
    values = matrix.values
    positions = matrix.column("position")

    def run_cell(cell: tuple[int, Fold]) -> FoldOutcome:
        subject, fold = cell
        model = train_fold_model(values, positions, fold.train_index, spec,
                                 derive_seed(seed, subject, fold.repetition, _POSITION_MODEL))
        test = fold.test_index
        return _outcome(subject, fold, test, positions[test], predict_batch(model, values[test]))

    outcomes = run_parallel(run_cell, _cells(matrix), jobs=jobs, progress_callback=progress_callback)
    classes = tuple(sorted(set(positions.tolist())))
    return TaskResult(TaskKind.POSITION, (matrix.kind.value,), spec.name, tuple(outcomes), classes)


def run_within_position_task(
    matrix: FeatureMatrix,
    classifier: Union[str, ClassifierSpec],
    seed: int = 0,
    jobs: int = 1,
    progress_callback=None,
) -> TaskResult:
    """
    Gesture classification trained and tested inside each position.

    With positions, each fold pools the correct counts of all positions;
    without positions a single nominal position is assumed.
    """
    spec = _as_spec(classifier)
    values = matrix.values
    gestures = matrix.column("gesture")
    with_positions = matrix.has_positions
    if with_positions:
        _require_positions(matrix)
        positions = matrix.column("position")

    def run_cell(cell: tuple[int, Fold]) -> FoldOutcome:
        subject, fold = cell
        test = fold.test_index
        if not with_positions:
            model = train_fold_model(values, gestures, fold.train_index, spec,
                                     derive_seed(seed, subject, fold.repetition, _GESTURE_MODEL))
            return _outcome(subject, fold, test, gestures[test], predict_batch(model, values[test]))

        routed = {int(p): test[positions[test] == p] for p in np.unique(positions[test])}
        rows, preds = _within_position_predictions(
            values, gestures, positions, fold.train_index, routed, spec, seed, subject, fold.repetition
        )
        return _outcome(subject, fold, rows, gestures[rows], preds)

    outcomes = run_parallel(run_cell, _cells(matrix), jobs=jobs, progress_callback=progress_callback)
    classes = tuple(sorted(set(gestures.tolist())))
    return TaskResult(TaskKind.WITHIN_POSITION, (matrix.kind.value,), spec.name, tuple(outcomes), classes)


def run_sequential_task(
    position_matrix: FeatureMatrix,
    gesture_matrix: FeatureMatrix,
    classifier: Union[str, ClassifierSpec],
    seed: int = 0,
    jobs: int = 1,
    gesture_classifier: Union[str, ClassifierSpec, None] = None,
    oracle: bool = False,
    progress_callback=None,
) -> TaskResult:
    """
    Two-stage classification: position model, then a position-specific gesture model.

    Args:
        position_matrix: features for the position stage
        gesture_matrix: features for the gesture stage (defines the test rows)
        classifier: family of the position stage (and gesture stage by default)
        seed: base seed
        jobs: concurrent cells
        gesture_classifier: optional different family for the gesture stage
        oracle: route with ground-truth positions instead of the position model
        progress_callback: optional callback(done, total)

    Returns:
        TaskResult: gesture accuracy after dispatch
    """
    _require_positions(gesture_matrix)
    _require_positions(position_matrix)
    spec = _as_spec(classifier)
    gesture_spec = _as_spec(gesture_classifier) if gesture_classifier is not None else spec

    position_values = gesture_matrix.pair_rows(position_matrix).values
    values = gesture_matrix.values
    gestures = gesture_matrix.column("gesture")
    positions = gesture_matrix.column("position")

    def run_cell(cell: tuple[int, Fold]) -> FoldOutcome:
        subject, fold = cell
        train, test = fold.train_index, fold.test_index
        trained_positions = np.unique(positions[train])

        if oracle:
            routed_positions = positions[test]
        else:
            position_model = train_fold_model(position_values, positions, train, spec,
                                              derive_seed(seed, subject, fold.repetition, _POSITION_MODEL))
            routed_positions = predict_batch(position_model, position_values[test])

        untrained = ~np.isin(routed_positions, trained_positions)
        if untrained.any():
            counts = np.bincount(positions[train] - positions[train].min())
            fallback = int(np.argmax(counts) + positions[train].min())
            logger.warning(
                "subject %d fold %d: %d windows routed to untrained positions, using position %d",
                subject, fold.repetition, int(untrained.sum()), fallback,
            )
            routed_positions = np.where(untrained, fallback, routed_positions)

        routed = {int(p): test[routed_positions == p] for p in np.unique(routed_positions)}
        rows, preds = _within_position_predictions(
            values, gestures, positions, train, routed, gesture_spec, seed, subject, fold.repetition
        )
        return _outcome(subject, fold, rows, gestures[rows], preds)

    outcomes = run_parallel(run_cell, _cells(gesture_matrix), jobs=jobs, progress_callback=progress_callback)
    classes = tuple(sorted(set(gestures.tolist())))
    return TaskResult(
        TaskKind.SEQUENTIAL,
        (position_matrix.kind.value, gesture_matrix.kind.value),
        spec.name,
        tuple(outcomes),
        classes,
        gesture_classifier=gesture_spec.name if gesture_classifier is not None else None,
        oracle=oracle,
    )


# ============================================================================
# Benchmark sweeps
# ============================================================================

FeatureChoice = Union[FeatureSetKind, tuple[FeatureSetKind, FeatureSetKind]]


def expand_features(task: TaskKind, features: Sequence[str]) -> list[FeatureChoice]:
    """
    Parse feature arguments; "all" expands to the four sets.

    For sequential, "pos+gesture" names an explicit pair and plain kinds
    expand to every (position, gesture) combination among them, so "all"
    gives the 16 pairs.
    """
    items = list(FeatureSetKind) if list(features) == ["all"] else None
    if task is not TaskKind.SEQUENTIAL:
        return items or [FeatureSetKind.parse(f) for f in features]

    pairs: list[FeatureChoice] = []
    plain = items or []
    for item in ([] if items else features):
        head, sep, tail = item.partition("+")
        if sep:
            pairs.append((FeatureSetKind.parse(head), FeatureSetKind.parse(tail)))
        else:
            plain.append(FeatureSetKind.parse(head))
    pairs.extend((p, g) for p in plain for g in plain)
    return pairs


def run_benchmark(
    store: FeatureStore,
    task: TaskKind,
    features: Sequence[FeatureChoice],
    classifiers: Sequence[Union[str, ClassifierSpec]],
    seed: int = 0,
    jobs: int = 1,
    gesture_classifier: Union[str, ClassifierSpec, None] = None,
    config: Optional[dict] = None,
    progress_callback=None,
) -> list[TaskResult]:
    """Run one task over every (feature choice, classifier) combination, in argument order."""
    if task in (TaskKind.POSITION, TaskKind.SEQUENTIAL) and not store.has_positions:
        raise TaskUnavailableError("task unavailable: no position labels")

    names = store.position_names if task is TaskKind.POSITION else store.gesture_names
    results = []
    for choice in features:
        for classifier in classifiers:
            if task is TaskKind.SEQUENTIAL:
                position_kind, gesture_kind = choice  # type: ignore[misc]
                logger.info("sequential %s -> %s, %s", position_kind.value, gesture_kind.value, classifier)
                result = run_sequential_task(
                    store.matrix(position_kind), store.matrix(gesture_kind), classifier, seed, jobs,
                    gesture_classifier=gesture_classifier, progress_callback=progress_callback,
                )
            elif task is TaskKind.POSITION:
                logger.info("position %s, %s", choice.value, classifier)  # type: ignore[union-attr]
                result = run_position_task(store.matrix(choice), classifier, seed, jobs,
                                           progress_callback=progress_callback)
            else:
                logger.info("gesture %s, %s", choice.value, classifier)  # type: ignore[union-attr]
                result = run_within_position_task(store.matrix(choice), classifier, seed, jobs,
                                                  progress_callback=progress_callback)
            results.append(replace(result, class_names=dict(names), config=dict(config or {})))
            logger.info("  accuracy %.1f+%.1f", 100 * result.mean, 100 * result.std)
    return results


# ============================================================================
# Significance
# ============================================================================

@dataclass(frozen=True)
class ComparisonResult:
    a: tuple[float, ...]
    b: tuple[float, ...]
    statistic: float
    p_value: float
    significant: bool
    method: str


@lru_cache(maxsize=256)
def _signed_rank_distribution(doubled_ranks: tuple[int, ...]) -> np.ndarray:
    """Null distribution of 2*W+ for the given doubled (mid)ranks, as probabilities."""
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return counts / counts.sum()


def compare_paired(a, b, alpha: float = SIGNIFICANCE_ALPHA) -> ComparisonResult:
    """
    Two-sided Wilcoxon signed-rank test on paired per-subject accuracies.

    Zero differences are dropped; the null distribution is exact up to
    EXACT_WILCOXON_MAX_N pairs (scipy without ties, enumerated midranks with
    ties), normal approximation above.
    All-zero differences give p = 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError(f"paired vectors differ in length: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < MIN_PAIRED_SUBJECTS:
        raise EvaluationError(f"paired comparison needs >= {MIN_PAIRED_SUBJECTS} subjects, got {a.shape[0]}")

    diff = np.round(a - b, 12)
    diff = diff[diff != 0]
    n = diff.shape[0]
    if n == 0:
        return ComparisonResult(tuple(a), tuple(b), 0.0, 1.0, False, "degenerate")

    ranks = stats.rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N and np.unique(ranks).shape[0] == n:
        p = float(stats.wilcoxon(diff, alternative="two-sided", method="exact").pvalue)
        method = "exact"
    elif n <= EXACT_WILCOXON_MAX_N:
        # tied midranks: exact null enumerated over doubled ranks
        doubled = tuple(int(round(2 * r)) for r in ranks)
        dist = _signed_rank_distribution(doubled)
        observed = int(round(2 * w_plus))
        lower = dist[:observed + 1].sum()
        upper = dist[observed:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
        method = "exact"
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        z = (abs(w_plus - mean) - 0.5) / np.sqrt(var) if var > 0 else 0.0
        p = min(1.0, 2.0 * float(stats.norm.sf(max(z, 0.0))))
        method = "normal"

    return ComparisonResult(tuple(a), tuple(b), w_plus, float(p), bool(p < alpha), method)


def compare_results(result_a: TaskResult, result_b: TaskResult) -> ComparisonResult:
    """Paired test over per-subject means of two results on the same subjects."""
    means_a, means_b = result_a.subject_means, result_b.subject_means
    if set(means_a) != set(means_b):
        raise EvaluationError(
            f"results cover different subjects: {sorted(means_a)} vs {sorted(means_b)}"
        )
    subjects = sorted(means_a)
    return compare_paired([means_a[s] for s in subjects], [means_b[s] for s in subjects])
