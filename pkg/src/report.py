"""
Markdown and CSV renderings of evaluation results.

Tables follow the published layouts: position recognition (classifier x
feature set), within-position gesture recognition (dataset, classifier x
feature set), sequential classification (position/gesture feature pair x
classifier) and row-normalized confusion matrices.
"""

import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from classifiers import ClassifierFamily, ClassifierSpec
from config import TDPSD_VERSION
from dataset_model import Dataset, TrialKey
from errors import BundleError
from evaluation import ComparisonResult, TaskKind, TaskResult
from features import FeatureSetKind

logger = logging.getLogger(__name__)

REFERENCE_TOLERANCE_POINTS = 3.0

# Published accuracies (mean, std in percent) of the biomedical and HCI datasets.
_CLASSIFIER_ORDER = ["lda", "qda", "knn", "rf"]
_FEATURE_ORDER = ["acc-med", "acc-rms", "emg-td", "emg-tdpsd"]


def _grid(rows: list[list[tuple[float, float]]]) -> dict[str, dict[str, tuple[float, float]]]:
    return {
        clf: dict(zip(_FEATURE_ORDER, cells))
        for clf, cells in zip(_CLASSIFIER_ORDER, rows)
    }


POSITION_REFERENCE = _grid([
    [(99.9, 0.3), (96.3, 5.2), (63.0, 9.7), (62.3, 8.0)],
    [(99.9, 0.1), (98.4, 1.8), (67.8, 8.9), (66.0, 7.6)],
    [(100.0, 0.0), (98.0, 2.4), (66.8, 8.1), (54.8, 8.4)],
    [(99.5, 0.6), (96.3, 3.2), (66.8, 8.4), (63.0, 8.5)],
])

GESTURE_REFERENCE = {
    "Bio": _grid([
        [(69.8, 4.4), (65.8, 4.5), (96.2, 0.7), (96.0, 0.4)],
        [(66.4, 4.8), (64.3, 5.1), (95.1, 0.8), (94.2, 0.5)],
        [(63.8, 5.6), (60.8, 5.1), (94.3, 0.9), (85.8, 1.2)],
        [(61.2, 4.9), (59.2, 3.3), (92.9, 0.7), (91.6, 0.9)],
    ]),
    "HCI-A": _grid([
        [(97.1, 1.5), (96.6, 1.9), (89.1, 3.5), (91.1, 2.7)],
        [(93.8, 3.8), (89.0, 5.5), (82.9, 5.3), (68.4, 7.0)],
        [(94.2, 2.6), (94.6, 2.4), (82.8, 4.5), (70.1, 4.8)],
        [(92.0, 3.8), (92.9, 2.5), (85.4, 3.6), (82.3, 3.8)],
    ]),
    "HCI-B": _grid([
        [(94.4, 4.0), (94.2, 4.1), (84.7, 8.1), (87.5, 8.6)],
        [(88.5, 8.5), (84.4, 8.5), (75.0, 8.4), (53.1, 10.4)],
        [(87.7, 8.8), (87.9, 8.6), (68.3, 9.1), (50.6, 9.2)],
        [(84.2, 6.9), (84.4, 7.1), (78.4, 7.0), (73.0, 8.4)],
    ]),
    "HCI-C": _grid([
        [(89.1, 4.4), (84.5, 6.6), (66.5, 8.5), (71.9, 8.5)],
        [(87.9, 8.1), (84.1, 8.9), (60.9, 9.6), (45.9, 8.8)],
        [(80.6, 9.1), (81.7, 9.2), (52.0, 9.8), (34.1, 7.1)],
        [(77.9, 8.9), (78.2, 8.9), (62.3, 8.6), (54.2, 8.0)],
    ]),
}

# (position features, gesture features) -> classifier -> (mean, std)
SEQUENTIAL_REFERENCE = {
    (pos, ges): dict(zip(_CLASSIFIER_ORDER, cells))
    for pos, rows in zip(_FEATURE_ORDER, [
        [[(65.5, 17.2), (62.4, 15.8), (60.2, 15.5), (58.2, 15.1)],
         [(61.9, 16.4), (60.5, 15.7), (57.5, 15.5), (55.8, 15.4)],
         [(96.0, 3.2), (94.7, 4.3), (93.9, 4.2), (92.5, 4.0)],
         [(95.6, 3.5), (93.6, 4.0), (84.7, 5.5), (91.0, 4.6)]],
        [[(63.8, 15.9), (61.9, 15.5), (59.5, 14.8), (57.2, 14.8)],
         [(60.5, 15.2), (60.0, 15.3), (56.7, 14.9), (54.1, 14.3)],
         [(95.5, 3.1), (94.4, 4.2), (93.6, 4.3), (91.5, 4.2)],
         [(95.2, 3.4), (93.3, 3.8), (84.3, 5.4), (90.6, 4.5)]],
        [[(50.2, 12.0), (49.7, 11.1), (51.1, 13.0), (47.3, 11.5)],
         [(46.7, 11.0), (47.4, 11.0), (46.6, 12.5), (44.1, 11.6)],
         [(93.4, 4.8), (92.8, 5.3), (94.1, 4.7), (91.2, 4.7)],
         [(93.2, 4.7), (92.2, 4.5), (84.3, 4.3), (89.8, 5.0)]],
        [[(49.7, 11.7), (49.1, 11.2), (47.0, 10.8), (46.5, 11.5)],
         [(45.8, 10.5), (47.3, 11.1), (42.0, 9.9), (43.4, 10.8)],
         [(93.3, 5.0), (92.8, 5.6), (91.2, 5.4), (90.2, 5.1)],
         [(93.5, 4.7), (92.1, 4.5), (83.1, 4.3), (89.2, 5.3)]],
    ])
    for ges, cells in zip(_FEATURE_ORDER, rows)
}


def format_cell(mean: float, std: float) -> str:
    """Accuracy fractions as a percent "mean+std" cell, one decimal."""
    return f"{100 * mean:.1f}+{100 * std:.1f}"


def _feature_title(value: str) -> str:
    return FeatureSetKind.parse(value).title


def _classifier_title(name: str) -> str:
    spec = ClassifierSpec.parse(name)
    return spec.title if spec.name == spec.family.value else f"{spec.title} ({name})"


def _classifier_key(name: str) -> tuple[int, str]:
    return (list(ClassifierFamily).index(ClassifierSpec.parse(name).family), name)


def _feature_key(value: str) -> int:
    return _FEATURE_ORDER.index(FeatureSetKind.parse(value).value)


def dataset_group(result: TaskResult) -> str:
    """Reference group of a gesture result: its subset name, else "Bio"."""
    return result.config.get("subset_name") or result.config.get("subset") or "Bio"


def reference_for(result: TaskResult) -> Optional[tuple[float, float]]:
    family = ClassifierSpec.parse(result.classifier).family.value
    if result.task is TaskKind.POSITION:
        return POSITION_REFERENCE.get(family, {}).get(result.features[0])
    if result.task is TaskKind.WITHIN_POSITION:
        return GESTURE_REFERENCE.get(dataset_group(result), {}).get(family, {}).get(result.features[0])
    return SEQUENTIAL_REFERENCE.get(tuple(result.features), {}).get(family)


def _cell(result: TaskResult, with_reference: bool) -> str:
    text = format_cell(result.mean, result.std)
    if not with_reference:
        return text
    ref = reference_for(result)
    if ref is None:
        return text
    delta = 100 * result.mean - ref[0]
    flag = "" if abs(delta) <= REFERENCE_TOLERANCE_POINTS else " !"
    return f"{text} (ref {ref[0]:.1f}+{ref[1]:.1f}, {delta:+.1f}{flag})"


def _markdown_table(header: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return lines


def render_position_table(results: Sequence[TaskResult], with_reference: bool = False) -> list[str]:
    by_cell = {(r.classifier, r.features[0]): r for r in results}
    features = sorted({r.features[0] for r in results}, key=_feature_key)
    classifiers = sorted({r.classifier for r in results}, key=_classifier_key)
    rows = [
        [_classifier_title(c)] + [
            _cell(by_cell[(c, f)], with_reference) if (c, f) in by_cell else "-" for f in features
        ]
        for c in classifiers
    ]
    return _markdown_table(["Classifier"] + [_feature_title(f) for f in features], rows)


def render_gesture_table(results: Sequence[TaskResult], with_reference: bool = False) -> list[str]:
    features = sorted({r.features[0] for r in results}, key=_feature_key)
    groups: dict[str, dict] = {}
    for r in results:
        groups.setdefault(dataset_group(r), {})[(r.classifier, r.features[0])] = r

    rows = []
    for group, by_cell in groups.items():
        classifiers = sorted({c for c, _ in by_cell}, key=_classifier_key)
        for i, c in enumerate(classifiers):
            rows.append([group if i == 0 else "", _classifier_title(c)] + [
                _cell(by_cell[(c, f)], with_reference) if (c, f) in by_cell else "-" for f in features
            ])
    return _markdown_table(["Dataset", "Classifier"] + [_feature_title(f) for f in features], rows)


def render_sequential_table(results: Sequence[TaskResult], with_reference: bool = False) -> list[str]:
    by_cell = {(tuple(r.features), r.classifier): r for r in results}
    pairs = sorted({tuple(r.features) for r in results}, key=lambda p: (_feature_key(p[0]), _feature_key(p[1])))
    classifiers = sorted({r.classifier for r in results}, key=_classifier_key)

    rows = []
    previous = None
    for pair in pairs:
        position_label = _feature_title(pair[0]) if pair[0] != previous else ""
        previous = pair[0]
        rows.append([position_label, _feature_title(pair[1])] + [
            _cell(by_cell[(pair, c)], with_reference) if (pair, c) in by_cell else "-" for c in classifiers
        ])
    return _markdown_table(["Position", "Gesture"] + [_classifier_title(c) for c in classifiers], rows)


def render_confusion(result: TaskResult) -> list[str]:
    """Row-normalized percentages with the diagonal in bold; empty rows are marked."""
    cm = result.confusion()
    names = [result.class_names.get(c, str(c)) for c in cm.classes]
    rows = []
    for i, name in enumerate(names):
        if cm.classes[i] in cm.empty_rows:
            logger.warning("confusion row %s has no test windows", name)
            rows.append([name] + ["-"] * len(names))
            continue
        rows.append([name] + [
            f"**{v:.1f}**" if i == j else f"{v:.1f}" for j, v in enumerate(cm.percent[i])
        ])
    return _markdown_table(["True \\ Predicted"] + names, rows)


def _describe(result: TaskResult) -> str:
    features = " -> ".join(_feature_title(f) for f in result.features)
    text = f"{features}, {_classifier_title(result.classifier)}"
    if result.task is TaskKind.WITHIN_POSITION:
        text = f"{dataset_group(result)}, {text}"
    return text


def render_comparison(comparison: ComparisonResult, label_a: str, label_b: str) -> list[str]:
    verdict = "significant" if comparison.significant else "not significant"
    mean_a, mean_b = 100 * np.mean(comparison.a), 100 * np.mean(comparison.b)
    return [
        f"- A: {label_a} ({mean_a:.1f}%)",
        f"- B: {label_b} ({mean_b:.1f}%)",
        f"- Wilcoxon signed-rank ({comparison.method}, n={len(comparison.a)}): "
        f"W+={comparison.statistic:g}, p={comparison.p_value:.4g}, {verdict}",
    ]


def _provenance_comment(config: dict) -> str:
    return f"<!-- tdpsd_definition={TDPSD_VERSION} run_config={json.dumps(config, sort_keys=True)} -->"


def render_report(
    results: Sequence[TaskResult],
    with_reference: bool = False,
    confusion: str = "gesture",
    comparisons: Iterable[tuple[ComparisonResult, str, str]] = (),
    config: Optional[dict] = None,
) -> str:
    """
    Full Markdown report.

    Args:
        results: evaluation results in any order
        with_reference: append published accuracies and deviation per cell
        confusion: "gesture" (within-position results), "all" or "none"
        comparisons: (comparison, label A, label B) triples
        config: resolved run config echoed at the top

    Returns:
        str: Markdown document
    """
    lines = [_provenance_comment(config or {}), "", "# Benchmark report", ""]
    sections = [
        (TaskKind.POSITION, "Position recognition", render_position_table),
        (TaskKind.WITHIN_POSITION, "Within-position gesture recognition", render_gesture_table),
        (TaskKind.SEQUENTIAL, "Sequential classification", render_sequential_table),
    ]
    for task, title, renderer in sections:
        part = [r for r in results if r.task is task]
        if not part:
            continue
        lines += [f"## {title}", "", "Accuracy (%) as mean+std across subjects.", ""]
        lines += renderer(part, with_reference)
        lines.append("")

    if with_reference:
        refs = [(r, reference_for(r)) for r in results]
        scored = [(r, ref) for r, ref in refs if ref is not None]
        within = sum(abs(100 * r.mean - ref[0]) <= REFERENCE_TOLERANCE_POINTS for r, ref in scored)
        lines += [f"Reference agreement: {within}/{len(scored)} cells within "
                  f"+/-{REFERENCE_TOLERANCE_POINTS:.0f} points (not gated).", ""]

    if confusion != "none":
        shown = [r for r in results if confusion == "all" or r.task is TaskKind.WITHIN_POSITION]
        if shown:
            lines += ["## Confusion matrices", ""]
            for r in shown:
                lines += [f"### {_describe(r)}", ""] + render_confusion(r) + [""]

    comparisons = list(comparisons)
    if comparisons:
        lines += ["## Paired comparisons", ""]
        for comparison, label_a, label_b in comparisons:
            lines += render_comparison(comparison, label_a, label_b) + [""]

    return "\n".join(lines).rstrip("\n") + "\n"


# ============================================================================
# CSV exports
# ============================================================================

def _write_csv(frame: pd.DataFrame, path: Path, config: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(f"# tdpsd_definition={TDPSD_VERSION}\n")
        f.write(f"# run_config={json.dumps(config, sort_keys=True)}\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    return path


def export_accuracies_csv(results: Sequence[TaskResult], path: str | Path, config: Optional[dict] = None) -> Path:
    """Long-format per-fold accuracies: task, features, classifier, subject, repetition, accuracy."""
    records = [
        {
            "task": r.task.value,
            "features": "+".join(r.features),
            "classifier": r.classifier,
            "subject": o.subject,
            "repetition": o.repetition,
            "windows": o.n_total,
            "accuracy": o.accuracy,
        }
        for r in results
        for o in r.outcomes
    ]
    return _write_csv(pd.DataFrame.from_records(records), Path(path), config or {})


def export_trial_csv(d: Dataset, key: TrialKey, out_dir: str | Path, config: Optional[dict] = None) -> list[Path]:
    """One CSV per modality of one trial: time_s followed by one column per channel."""
    matches = [t for t in d.trials if t.key == key]
    if not matches:
        raise BundleError(f"no trial {key.label()} in {d.name}")
    trial = matches[0]

    written = []
    for stream in trial.streams:
        frame = pd.DataFrame(
            stream.samples.T, columns=[f"ch{c}" for c in range(stream.channel_count)]
        )
        frame.insert(0, "time_s", np.arange(stream.n_samples) / stream.sample_rate_hz)
        path = Path(out_dir) / f"{key.label()}_{stream.modality.value}.csv"
        written.append(_write_csv(frame, path, config or {}))
    return written
