import numpy as np
import pandas as pd
import pytest

from conftest import make_dataset
from dataset_model import TrialKey
from errors import BundleError
from evaluation import FoldOutcome, TaskKind, TaskResult, compare_paired
from report import (
    export_accuracies_csv,
    export_trial_csv,
    format_cell,
    reference_for,
    render_report,
)


def _result(task, features, classifier, accuracy, subset=None, classes=(1, 2)):
    outcomes = []
    for subject in (1, 2):
        truth = np.repeat(classes, 5)
        predicted = truth.copy()
        predicted[: int(round(len(truth) * (1 - accuracy)))] = classes[-1]
        outcomes.append(FoldOutcome(subject, 1, np.arange(len(truth)), truth, predicted))
    config = {"subset_name": subset} if subset else {}
    return TaskResult(task, features, classifier, tuple(outcomes), tuple(classes),
                      class_names={c: f"G{c}" for c in classes}, config=config)


def test_format_cell():
    assert format_cell(0.9875, 0.0123) == "98.8+1.2"
    assert format_cell(1.0, 0.0) == "100.0+0.0"


def test_reference_lookup():
    position = _result(TaskKind.POSITION, ("acc-med",), "lda", 1.0)
    assert reference_for(position) == (99.9, 0.3)
    hci = _result(TaskKind.WITHIN_POSITION, ("acc-med",), "lda", 1.0, subset="HCI-A")
    assert reference_for(hci) == (97.1, 1.5)
    bio = _result(TaskKind.WITHIN_POSITION, ("emg-td",), "knn:3", 1.0)
    assert reference_for(bio) == (94.3, 0.9)


def test_report_sections():
    results = [
        _result(TaskKind.POSITION, ("acc-med",), "lda", 1.0),
        _result(TaskKind.POSITION, ("acc-rms",), "lda", 0.8),
        _result(TaskKind.WITHIN_POSITION, ("emg-td",), "lda", 0.9),
        _result(TaskKind.SEQUENTIAL, ("acc-med", "emg-td"), "rf", 0.7),
    ]
    text = render_report(results, with_reference=True, config={"seed": 1})
    assert text.startswith("<!-- tdpsd_definition=tdpsd-v1")
    for heading in ("# Benchmark report", "## Position recognition",
                    "## Within-position gesture recognition", "## Sequential classification",
                    "## Confusion matrices"):
        assert heading in text
    assert "100.0+0.0 (ref 99.9+0.3, +0.1)" in text
    assert "Reference agreement:" in text
    assert "**" in text


def test_confusion_none_and_comparisons():
    result = _result(TaskKind.WITHIN_POSITION, ("emg-td",), "lda", 1.0)
    comparison = compare_paired([0.9] * 6, [0.8] * 6)
    text = render_report([result], confusion="none", comparisons=[(comparison, "a.json", "b.json")])
    assert "## Confusion matrices" not in text
    assert "## Paired comparisons" in text
    assert "significant" in text


def test_empty_confusion_row_is_marked(caplog):
    result = _result(TaskKind.WITHIN_POSITION, ("emg-td",), "lda", 1.0, classes=(1, 2))
    result = TaskResult(result.task, result.features, result.classifier, result.outcomes, (1, 2, 3))
    text = render_report([result])
    assert "| 3 | - | - | - |" in text
    assert "no test windows" in caplog.text


def test_accuracies_csv(tmp_path):
    results = [_result(TaskKind.POSITION, ("acc-med",), "lda", 0.8)]
    path = export_accuracies_csv(results, tmp_path / "acc.csv", {"seed": 2})
    lines = path.read_text().splitlines()
    assert lines[0] == "# tdpsd_definition=tdpsd-v1"
    assert lines[1] == '# run_config={"seed": 2}'
    frame = pd.read_csv(path, comment="#")
    assert list(frame.columns) == ["task", "features", "classifier", "subject", "repetition", "windows", "accuracy"]
    assert frame["accuracy"].tolist() == pytest.approx([0.8, 0.8])


def test_trial_csv(tmp_path):
    d = make_dataset()
    key = d.trials[0].key
    paths = export_trial_csv(d, key, tmp_path)
    assert [p.name for p in paths] == [f"{key.label()}_emg.csv", f"{key.label()}_acc.csv"]
    frame = pd.read_csv(paths[0], comment="#", float_precision="round_trip")
    assert list(frame.columns) == ["time_s", "ch0", "ch1"]
    assert frame["time_s"].iloc[1] == pytest.approx(1e-3)
    np.testing.assert_array_equal(frame[["ch0", "ch1"]].to_numpy().T, d.trials[0].streams[0].samples)

    with pytest.raises(BundleError, match="no trial"):
        export_trial_csv(d, TrialKey(9, 9, None, 9), tmp_path)
