import json

import numpy as np
import pandas as pd
import pytest

from classifiers import ClassifierSpec, model_to_dict
from errors import EvaluationError, TaskUnavailableError
from evaluation import (
    FoldOutcome,
    TaskKind,
    TaskResult,
    _signed_rank_distribution,
    compare_paired,
    compare_results,
    confusion_matrix,
    expand_features,
    load_result,
    make_loto_folds,
    run_benchmark,
    run_position_task,
    run_sequential_task,
    run_within_position_task,
    train_fold_model,
    write_result,
)
from features import FeatureMatrix, FeatureSetKind


def _result(per_subject, task=TaskKind.WITHIN_POSITION, classifier="lda"):
    """TaskResult whose subject s scores per_subject[s] on every fold."""
    outcomes = []
    for subject, accuracy in per_subject.items():
        for rep in (1, 2):
            truth = np.zeros(10, dtype=np.int64)
            predicted = np.where(np.arange(10) < round(10 * accuracy), 0, 1)
            outcomes.append(FoldOutcome(subject, rep, np.arange(10), truth, predicted))
    return TaskResult(task, ("emg-td",), classifier, tuple(outcomes), (0, 1))


# ============================================================================
# Folds
# ============================================================================

def test_folds_partition_subject_rows(bio_store):
    matrix = bio_store.matrix(FeatureSetKind.TD)
    reps = matrix.column("repetition")
    for subject in matrix.subjects():
        plan = make_loto_folds(matrix, subject)
        subject_rows = np.flatnonzero(matrix.labels["subject"].to_numpy() == subject)
        assert [f.repetition for f in plan.folds] == sorted(set(reps[subject_rows]))

        tested = np.concatenate([f.test_index for f in plan.folds])
        assert sorted(tested.tolist()) == subject_rows.tolist()
        for fold in plan.folds:
            assert np.intersect1d(fold.train_index, fold.test_index).size == 0
            assert np.union1d(fold.train_index, fold.test_index).tolist() == subject_rows.tolist()
            assert set(reps[fold.test_index]) == {fold.repetition}
            assert fold.repetition not in set(reps[fold.train_index])
            # held-out repetition covers every gesture and position
            test_labels = matrix.labels.iloc[fold.test_index]
            assert set(test_labels["gesture"]) == set(bio_store.gesture_names)
            assert set(test_labels["position"]) == set(bio_store.position_names)


def test_single_repetition_cannot_be_folded(bio_store):
    matrix = bio_store.matrix(FeatureSetKind.TD)
    one_rep = matrix.select(matrix.column("repetition") == 1)
    with pytest.raises(EvaluationError, match="repetitions"):
        make_loto_folds(one_rep, 1)


def test_training_never_sees_test_rows(bio_store):
    matrix = bio_store.matrix(FeatureSetKind.TD).for_subject(1)
    fold = make_loto_folds(matrix).folds[0]
    gestures = matrix.column("gesture")
    spec = ClassifierSpec.parse("lda")

    original = train_fold_model(matrix.values, gestures, fold.train_index, spec, seed=1)
    tampered_values = matrix.values.copy()
    tampered_values[fold.test_index] = 1e6
    tampered_labels = gestures.copy()
    tampered_labels[fold.test_index] = 99
    tampered = train_fold_model(tampered_values, tampered_labels, fold.train_index, spec, seed=1)
    assert model_to_dict(original) == model_to_dict(tampered)


# ============================================================================
# Tasks
# ============================================================================

def test_position_task(bio_store):
    result = run_position_task(bio_store.matrix(FeatureSetKind.MED), "lda")
    assert result.task is TaskKind.POSITION
    assert result.classes == tuple(sorted(bio_store.position_names))
    assert len(result.outcomes) == 2 * 2
    for o in result.outcomes:
        assert 0.0 <= o.accuracy <= 1.0
    means = list(result.subject_means.values())
    assert min(means) <= result.mean <= max(means)
    assert result.mean > 0.8


def test_within_position_task_scores_every_window(bio_store):
    matrix = bio_store.matrix(FeatureSetKind.TD)
    result = run_within_position_task(matrix, "lda")
    assert sum(o.n_total for o in result.outcomes) == matrix.n_rows
    assert result.classes == tuple(sorted(bio_store.gesture_names))
    assert result.mean > 0.5


def test_results_do_not_depend_on_jobs(bio_store):
    matrix = bio_store.matrix(FeatureSetKind.TD)
    serial = run_within_position_task(matrix, "rf", seed=5, jobs=1)
    pooled = run_within_position_task(matrix, "rf", seed=5, jobs=4)
    assert serial.to_dict() == pooled.to_dict()


def test_oracle_sequential_equals_within_position(bio_store):
    med, td = bio_store.matrix(FeatureSetKind.MED), bio_store.matrix(FeatureSetKind.TD)
    for classifier in ("lda", "rf"):
        within = run_within_position_task(td, classifier, seed=3)
        oracle = run_sequential_task(med, td, classifier, seed=3, oracle=True)
        assert oracle.oracle
        for a, b in zip(within.outcomes, oracle.outcomes):
            assert np.array_equal(a.test_index, b.test_index)
            assert np.array_equal(a.predicted, b.predicted)
        assert within.mean == oracle.mean


def test_sequential_task(bio_store):
    med, td = bio_store.matrix(FeatureSetKind.MED), bio_store.matrix(FeatureSetKind.TD)
    result = run_sequential_task(med, td, "lda", gesture_classifier="knn")
    assert result.features == ("acc-med", "emg-td")
    assert result.gesture_classifier == "knn"
    assert sum(o.n_total for o in result.outcomes) == td.n_rows
    assert result.stem == "sequential_acc-med+emg-td_lda"


def test_tasks_need_positions(hci_store):
    with pytest.raises(TaskUnavailableError, match="no position labels"):
        run_position_task(hci_store.matrix(FeatureSetKind.MED), "lda")
    with pytest.raises(TaskUnavailableError, match="no position labels"):
        run_sequential_task(hci_store.matrix(FeatureSetKind.MED), hci_store.matrix(FeatureSetKind.TD), "lda")
    with pytest.raises(TaskUnavailableError, match="no position labels"):
        run_benchmark(hci_store, TaskKind.SEQUENTIAL, [(FeatureSetKind.MED, FeatureSetKind.TD)], ["lda"])


def test_within_position_without_positions(hci_store):
    store = hci_store.keep_gestures([9, 10, 11, 12])
    result = run_within_position_task(store.matrix(FeatureSetKind.MED), "lda")
    assert result.classes == (9, 10, 11, 12)
    assert 0.0 <= result.mean <= 1.0


def test_benchmark_sweep(bio_store):
    choices = expand_features(TaskKind.WITHIN_POSITION, ["emg-td", "acc-med"])
    results = run_benchmark(bio_store, TaskKind.WITHIN_POSITION, choices, ["lda", "knn"],
                            config={"seed": 0})
    assert [(r.features[0], r.classifier) for r in results] == [
        ("emg-td", "lda"), ("emg-td", "knn"), ("acc-med", "lda"), ("acc-med", "knn"),
    ]
    for r in results:
        assert r.class_names == bio_store.gesture_names
        assert r.config == {"seed": 0}


def test_expand_features():
    assert expand_features(TaskKind.POSITION, ["all"]) == list(FeatureSetKind)
    pairs = expand_features(TaskKind.SEQUENTIAL, ["all"])
    assert len(pairs) == 16
    assert expand_features(TaskKind.SEQUENTIAL, ["acc-med+emg-td"]) == [(FeatureSetKind.MED, FeatureSetKind.TD)]
    assert len(expand_features(TaskKind.SEQUENTIAL, ["acc-med", "emg-td"])) == 4


def test_task_parse():
    assert TaskKind.parse("within-position") is TaskKind.WITHIN_POSITION
    assert TaskKind.parse("Sequential") is TaskKind.SEQUENTIAL
    with pytest.raises(EvaluationError):
        TaskKind.parse("regression")


# ============================================================================
# Aggregation and persistence
# ============================================================================

def test_std_across_subject_means():
    result = _result({1: 0.5, 2: 1.0, 3: 0.9})
    assert result.subject_means == {1: 0.5, 2: 1.0, 3: 0.9}
    assert result.mean == pytest.approx(0.8)
    assert result.std == pytest.approx(np.std([0.5, 1.0, 0.9], ddof=1))
    assert _result({1: 0.7}).std == 0.0


def test_result_files(tmp_path):
    result = _result({1: 0.5, 2: 1.0})
    json_path, csv_path = write_result(result, tmp_path)
    assert json_path.name == "gesture_emg-td_lda.json"
    data = json.loads(json_path.read_text())
    assert data["mean"] == pytest.approx(0.75)
    assert data["tdpsd_definition"] == "tdpsd-v1"

    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("# tdpsd_definition=")
    frame = pd.read_csv(csv_path, comment="#", index_col=0)
    assert frame.shape == (2, 2)

    loaded = load_result(json_path)
    assert loaded.to_dict() == result.to_dict()


# ============================================================================
# Confusion matrices
# ============================================================================

def test_perfect_predictions_give_identity():
    truth = np.repeat([1, 2, 3], 5)
    cm = confusion_matrix(truth, truth, (1, 2, 3))
    assert np.array_equal(cm.percent, 100 * np.eye(3))


def test_uniform_predictions_spread_evenly():
    rng = np.random.default_rng(0)
    truth = np.repeat(np.arange(6), 6000)
    cm = confusion_matrix(truth, rng.integers(0, 6, truth.size), range(6))
    assert np.all(np.abs(cm.percent - 100 / 6) <= 2.0)
    assert np.allclose(cm.percent.sum(axis=1), 100.0)


def test_empty_row_is_flagged():
    cm = confusion_matrix([1, 1, 3], [1, 3, 3], (1, 2, 3))
    assert cm.empty_rows == (2,)
    assert np.all(cm.percent[1] == 0)
    assert cm.percent[0].tolist() == [50.0, 0.0, 50.0]


def test_confusion_rejects_unknown_labels():
    with pytest.raises(EvaluationError, match="not in the class list"):
        confusion_matrix([1, 4], [1, 1], (1, 2))
    with pytest.raises(EvaluationError):
        confusion_matrix([1, 2], [1], (1, 2))


# ============================================================================
# Paired significance
# ============================================================================

def test_identical_vectors_are_not_significant():
    a = [0.8, 0.9, 0.7, 0.85, 0.95, 0.6]
    c = compare_paired(a, a)
    assert c.p_value == 1.0
    assert not c.significant


def test_uniform_shift_is_significant():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.5, 0.9, 12)
    c = compare_paired(a + 0.05, a)
    assert c.method == "exact"
    assert c.p_value == pytest.approx(2 / 2 ** 12)
    assert c.significant


def test_untied_exact_matches_enumeration():
    diff = np.array([1, -2, 3, 4, 5, 6, 7, 8]) / 100.0
    c = compare_paired(diff, np.zeros(8))
    assert c.method == "exact"
    assert c.statistic == 34.0
    # W- <= 2 for 3 of the 256 sign patterns
    assert c.p_value == pytest.approx(2 * 3 / 256)

    dist = _signed_rank_distribution(tuple(2 * r for r in range(1, 9)))
    assert c.p_value == pytest.approx(2 * dist[: 2 * 2 + 1].sum())


def test_tied_ranks_use_midrank_null():
    diff = np.array([0.02, 0.02, -0.01, 0.03, 0.04, 0.05, 0.06])
    c = compare_paired(diff, np.zeros(7))
    assert c.method == "exact"
    # ranks 2.5, 2.5, 1, 4..7 so W- = 1
    assert c.statistic == 27.0
    dist = _signed_rank_distribution((5, 5, 2, 8, 10, 12, 14))
    assert c.p_value == pytest.approx(2 * dist[:3].sum())


def test_false_positive_rate_is_calibrated():
    rng = np.random.default_rng(2)
    rejections = 0
    for _ in range(1000):
        a = rng.standard_normal(20)
        b = rng.standard_normal(20)
        rejections += compare_paired(a, b).significant
    assert 0.03 <= rejections / 1000 <= 0.07


def test_normal_approximation_for_many_subjects():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.5, 0.9, 40)
    c = compare_paired(a + rng.uniform(0.01, 0.05, 40), a)
    assert c.method == "normal"
    assert c.significant


def test_paired_input_checks():
    with pytest.raises(EvaluationError, match="length"):
        compare_paired([0.1] * 6, [0.1] * 7)
    with pytest.raises(EvaluationError, match=">= 6"):
        compare_paired([0.1] * 5, [0.2] * 5)


def test_compare_results_needs_same_subjects():
    a = _result({s: 0.8 for s in range(1, 7)})
    b = _result({s: 0.7 for s in range(2, 8)})
    with pytest.raises(EvaluationError, match="different subjects"):
        compare_results(a, b)
    c = compare_results(a, _result({s: 0.6 for s in range(1, 7)}))
    assert c.p_value == pytest.approx(2 / 2 ** 6)


def test_feature_matrix_without_positions_is_unavailable():
    labels = pd.DataFrame({
        "subject": [1, 1], "gesture": [1, 2], "position": pd.array([None, None], dtype="Int64"),
        "repetition": [1, 2], "window": [0, 0], "window_start_s": [0.0, 0.0],
    })
    matrix = FeatureMatrix(FeatureSetKind.MED, np.zeros((2, 3)), labels)
    with pytest.raises(TaskUnavailableError):
        run_position_task(matrix, "lda")
