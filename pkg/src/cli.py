#!/usr/bin/env python3
"""
EMG + accelerometer gesture benchmark - command-line entry point.

Stages communicate through on-disk artifacts:

    convert / synth  ->  bundle
    preprocess       ->  filtered bundle
    features         ->  feature store
    eval             ->  result JSON + confusion CSV
    report           ->  Markdown tables / plot-ready CSV

`features` and `eval` accept a raw bundle too and run the missing stages
in memory. Every output carries the resolved run config.

Usage:
    python cli.py synth --preset bio-like --scale 0.25 --seed 7 --out data/bio
    python cli.py eval --bundle data/bio --task position --features acc-med --classifier lda
    python cli.py report out/*.json --reference
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from classifiers import ClassifierSpec, fit, save_model
from config import (
    DEFAULT_OUTPUT_DIR,
    DEFAULT_PRESET,
    STORE_INDEX_NAME,
    TDPSD_VERSION,
    RunConfig,
    load_run_config,
)
from dataset_model import TrialKey, convert_index, load_bundle, load_subset, read_provenance, save_bundle
from errors import BenchError, ConfigError, TaskUnavailableError
from evaluation import (
    TaskKind,
    compare_results,
    expand_features,
    load_result,
    run_benchmark,
    write_result,
)
from features import FeatureSetKind, FeatureStore, extract_dataset, load_feature_store, write_feature_store
from preprocessing import FilterSettings, WindowSpec, preprocess_dataset
from report import export_accuracies_csv, export_trial_csv, render_report
from synthetic import describe, generate, preset

logger = logging.getLogger("bench")

PREPROCESSED_STAGE = "preprocessed"


class UsageError(BenchError):
    code = "usage"


class BenchArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage and exiting."""

    def error(self, message: str):
        raise UsageError(message)


def banner(title: str, **details) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)
    for key, value in details.items():
        logger.info("%s: %s", key.replace("_", " ").capitalize(), value)
    logger.info("=" * 60)


def progress(label: str):
    """Progress callback logging roughly every tenth of the work."""
    def report(done: int, total: int) -> None:
        step = max(1, total // 10)
        if done == total or done % step == 0:
            logger.info("  [%d/%d] %s", done, total, label)
    return report


def setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(message)s", force=True)


def split_list(text: Optional[str]) -> Optional[list[str]]:
    if text is None:
        return None
    return [item.strip() for item in text.split(",") if item.strip()]


# ============================================================================
# Config resolution
# ============================================================================

def resolve_config(args: argparse.Namespace) -> RunConfig:
    """TOML file values, then command-line flags."""
    cfg = load_run_config(args.config)
    overrides = {
        "bundle_path": getattr(args, "bundle", None),
        "notch_hz": getattr(args, "notch", None),
        "causal": True if getattr(args, "causal", False) else None,
        "window_ms": getattr(args, "window_ms", None),
        "increment_ms": getattr(args, "increment_ms", None),
        "feature_kinds": split_list(getattr(args, "features", None)),
        "zc_ssc_threshold": getattr(args, "zc_threshold", None),
        "classifiers": split_list(getattr(args, "classifier", None)),
        "tasks": split_list(getattr(args, "task", None)),
        "subset": getattr(args, "subset", None),
        "exclude_gestures": split_list(getattr(args, "exclude", None)),
        "gesture_classifier": getattr(args, "gesture_classifier", None),
        "seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", None),
        "preset": getattr(args, "preset", None),
        "scale": getattr(args, "scale", None),
        "kappa": getattr(args, "kappa", None),
        "output_dir": getattr(args, "out", None),
    }
    return cfg.with_overrides(**overrides)


def provenance(cfg: RunConfig, stage: str, **extra) -> dict:
    return {"stage": stage, "tdpsd_definition": TDPSD_VERSION, "run_config": cfg.to_dict(), **extra}


def require_bundle(cfg: RunConfig) -> Path:
    if not cfg.bundle_path:
        raise ConfigError("no bundle given (use --bundle or [bundle] bundle_path)")
    return Path(cfg.bundle_path)


def obtain_store(cfg: RunConfig, kinds: list[FeatureSetKind]) -> FeatureStore:
    """Load a feature store, or build one in memory from a (raw or filtered) bundle."""
    path = require_bundle(cfg)
    if (path / STORE_INDEX_NAME).is_file():
        return load_feature_store(path, kinds)

    dataset = load_bundle(path)
    if read_provenance(path).get("stage") != PREPROCESSED_STAGE:
        logger.info("Bundle is unfiltered, preprocessing %d trials", len(dataset.trials))
        dataset = preprocess_dataset(dataset, cfg.notch_hz, FilterSettings.from_run_config(cfg),
                                     cfg.jobs, progress("trials filtered"))
    window = WindowSpec(cfg.window_ms, cfg.increment_ms)
    matrices = extract_dataset(dataset, window, kinds, cfg.zc_ssc_threshold, cfg.jobs,
                               progress("trials featurized"))
    return FeatureStore(dataset.name, dataset.gesture_names, dataset.position_names, matrices, window,
                        {"run_config": cfg.to_dict()})


def narrow_store(store: FeatureStore, cfg: RunConfig) -> FeatureStore:
    if cfg.subset:
        store = store.apply_subset(load_subset(cfg.subset))
    return store.exclude(cfg.exclude_gestures)


# ============================================================================
# Subcommands
# ============================================================================

def cmd_convert(args: argparse.Namespace, cfg: RunConfig) -> int:
    banner("Convert", index=args.index, names=args.names, output=cfg.output_dir)
    dataset = convert_index(args.index, args.names, args.name)
    save_bundle(dataset, cfg.output_dir, args.encoding, provenance(cfg, "convert"))
    logger.info("Wrote %d trials to %s", len(dataset.trials), cfg.output_dir)
    return 0


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    config = preset(cfg.preset, cfg.scale, cfg.seed, cfg.kappa)
    banner("Synthetic dataset", preset=cfg.preset, scale=cfg.scale, seed=cfg.seed,
           kappa=config.kappa, trials=config.trial_count, output=cfg.output_dir)
    dataset = generate(config, cfg.jobs, progress("trials generated"))
    save_bundle(dataset, cfg.output_dir, args.encoding, provenance(cfg, "synth", synthetic=describe(config)))
    logger.info("Wrote %d trials to %s", len(dataset.trials), cfg.output_dir)
    return 0


def cmd_preprocess(args: argparse.Namespace, cfg: RunConfig) -> int:
    path = require_bundle(cfg)
    banner("Preprocess", bundle=path, notch=f"{cfg.notch_hz} Hz", causal=cfg.causal, output=cfg.output_dir)
    dataset = load_bundle(path)
    filtered = preprocess_dataset(dataset, cfg.notch_hz, FilterSettings.from_run_config(cfg),
                                  cfg.jobs, progress("trials filtered"))
    save_bundle(filtered, cfg.output_dir, args.encoding,
                provenance(cfg, PREPROCESSED_STAGE, source=read_provenance(path)))
    return 0


def cmd_features(args: argparse.Namespace, cfg: RunConfig) -> int:
    kinds = [FeatureSetKind.parse(k) for k in cfg.feature_kinds]
    banner("Features", bundle=cfg.bundle_path, features=", ".join(k.value for k in kinds),
           window=f"{cfg.window_ms} ms / {cfg.increment_ms} ms", output=cfg.output_dir)
    path = require_bundle(cfg)
    if (path / STORE_INDEX_NAME).is_file():
        raise ConfigError(f"{path} is already a feature store")
    store = obtain_store(cfg, kinds)
    written = write_feature_store(store.matrices, cfg.output_dir, store, store.window,
                                  provenance(cfg, "features"))
    logger.info("Wrote %d feature files to %s", len(written), cfg.output_dir)
    return 0


def _tasks_to_run(cfg: RunConfig, explicit: bool, has_positions: bool) -> list[TaskKind]:
    tasks = [TaskKind.parse(t) for t in cfg.tasks]
    if has_positions:
        return tasks
    unavailable = [t for t in tasks if t is not TaskKind.WITHIN_POSITION]
    if unavailable and explicit:
        raise TaskUnavailableError("task unavailable: no position labels")
    for t in unavailable:
        logger.warning("Skipping %s task: dataset has no position labels", t.value)
    return [t for t in tasks if t is TaskKind.WITHIN_POSITION]


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    task_kinds = [TaskKind.parse(t) for t in cfg.tasks]
    choices = {t: expand_features(t, cfg.feature_kinds) for t in task_kinds}
    needed = sorted({k for cs in choices.values() for c in cs for k in (c if isinstance(c, tuple) else (c,))},
                    key=lambda k: list(FeatureSetKind).index(k))
    classifiers = [ClassifierSpec.parse(c) for c in cfg.classifiers]
    gesture_classifier = ClassifierSpec.parse(cfg.gesture_classifier) if cfg.gesture_classifier else None

    banner("Evaluate", bundle=cfg.bundle_path, tasks=", ".join(t.value for t in task_kinds),
           features=", ".join(cfg.feature_kinds), classifiers=", ".join(c.name for c in classifiers),
           subset=cfg.subset or "-", seed=cfg.seed, jobs=cfg.jobs, output=cfg.output_dir)

    store = narrow_store(obtain_store(cfg, needed), cfg)
    echo = {**cfg.to_dict(), "subset_name": store.subset}

    summary = []
    for task in _tasks_to_run(cfg, args.task is not None, store.has_positions):
        results = run_benchmark(store, task, choices[task], classifiers, cfg.seed, cfg.jobs,
                                gesture_classifier, echo)
        for result in results:
            write_result(result, cfg.output_dir)
            summary.append({
                "result": f"{result.stem}.json",
                "task": result.task.value,
                "features": list(result.features),
                "classifier": result.classifier,
                "mean": result.mean,
                "std": result.std,
            })

    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    payload = {"results": summary, "tdpsd_definition": TDPSD_VERSION, "config": echo}
    Path(cfg.output_dir, "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    kind = FeatureSetKind.parse(args.features or cfg.feature_kinds[0])
    spec = ClassifierSpec.parse(args.classifier or cfg.classifiers[0])
    target = args.target
    banner("Train", bundle=cfg.bundle_path, subject=args.subject, target=target,
           features=kind.value, classifier=spec.name, output=args.model)

    store = narrow_store(obtain_store(cfg, [kind]), cfg)
    matrix = store.matrix(kind).for_subject(args.subject)
    if matrix.n_rows == 0:
        raise ConfigError(f"subject {args.subject} has no rows")
    if target == "position" and not matrix.has_positions:
        raise TaskUnavailableError("task unavailable: no position labels")
    if args.position is not None:
        matrix = matrix.select(matrix.labels["position"].to_numpy(dtype="float64", na_value=-1) == args.position)

    model = fit(spec, matrix.values, matrix.column(target), seed=cfg.seed, jobs=cfg.jobs)
    save_model(model, args.model, {
        "target": target,
        "features": kind.value,
        "subject": args.subject,
        "position": args.position,
        "tdpsd_definition": TDPSD_VERSION,
        "config": cfg.to_dict(),
    })
    logger.info("Saved %s model (%d rows, %d classes) to %s", spec.title, matrix.n_rows, len(model.classes), args.model)
    return 0


def _collect_results(paths: list[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(f for f in p.glob("*.json") if f.name != "summary.json"))
        else:
            files.append(p)
    return files


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    files = _collect_results(args.results)
    results = [load_result(f) for f in files]
    comparisons = []
    if args.compare:
        a, b = (load_result(p) for p in args.compare)
        comparisons.append((compare_results(a, b), args.compare[0], args.compare[1]))
    if not results and not comparisons and not args.trial:
        raise ConfigError("nothing to report (give result files, --compare or --trial)")

    echo = results[0].config if results else cfg.to_dict()
    if results or comparisons:
        text = render_report(results, args.reference, args.confusion, comparisons, echo)
        if args.output:
            Path(args.output).parent.mkdir(parents=True, exist_ok=True)
            Path(args.output).write_text(text)
            logger.info("Wrote report to %s", args.output)
        else:
            sys.stdout.write(text)

    if args.csv:
        if results:
            export_accuracies_csv(results, Path(args.csv) / "accuracies.csv", echo)
        if args.trial:
            key = parse_trial_key(args.trial)
            dataset = load_bundle(require_bundle(cfg))
            export_trial_csv(dataset, key, args.csv, echo)
        logger.info("Wrote CSV exports to %s", args.csv)
    return 0


def parse_trial_key(text: str) -> TrialKey:
    """"S,G,P,R" with P blank or "x" for no position."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"trial must be S,G,P,R, got {text!r}")
    try:
        position = None if parts[2] in ("", "x", "-") else int(parts[2])
        return TrialKey(int(parts[0]), int(parts[1]), position, int(parts[3]))
    except ValueError:
        raise ConfigError(f"trial must be S,G,P,R, got {text!r}") from None


# ============================================================================
# Parser
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = BenchArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (flags override its values)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    common.add_argument("--quiet", "-q", action="store_true", help="Warnings only")

    parser = BenchArgumentParser(
        prog="cli.py",
        description="Offline EMG + accelerometer gesture-recognition benchmark",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    # Synthetic biomedical-style bundle at quarter scale
    python cli.py synth --preset bio-like --scale 0.25 --seed 7 --out data/bio

    # Position recognition from accelerometer medians
    python cli.py eval --bundle data/bio --task position --features acc-med --classifier lda

    # Explicit stages
    python cli.py preprocess --bundle data/bio --out data/bio-filtered
    python cli.py features --bundle data/bio-filtered --out data/bio-features
    python cli.py eval --bundle data/bio-features --task sequential --features acc-med+emg-td

    # Tables with published reference values
    python cli.py report out/ --reference --output out/report.md
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=BenchArgumentParser)

    p = sub.add_parser("convert", parents=[common], help="Assemble a bundle from an index CSV")
    p.add_argument("--index", required=True, help="Index CSV, one row per (trial, stream)")
    p.add_argument("--names", required=True, help="JSON with gesture_names / position_names")
    p.add_argument("--name", help="Dataset name (default: index file stem)")
    p.add_argument("--encoding", choices=["csv", "f32le"], default="csv")
    p.add_argument("--out", help=f"Bundle directory (default: {DEFAULT_OUTPUT_DIR})")

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic bundle")
    p.add_argument("--preset", choices=["bio-like", "hci-like"], help=f"Preset (default: {DEFAULT_PRESET})")
    p.add_argument("--scale", type=float, help="Subject/repetition scale in (0, 1] (default: 1)")
    p.add_argument("--kappa", type=float, help="Override positional coupling in [0, 1]")
    p.add_argument("--seed", type=int, help="Generator seed (default: 0)")
    p.add_argument("--jobs", type=int, help="Concurrent trials (default: 1)")
    p.add_argument("--encoding", choices=["csv", "f32le"], default="csv")
    p.add_argument("--out", help="Bundle directory")

    p = sub.add_parser("preprocess", parents=[common], help="Notch/bandpass EMG, lowpass ACC")
    p.add_argument("--bundle", help="Input bundle")
    p.add_argument("--notch", type=int, choices=[50, 60], help="Mains frequency (default: 60)")
    p.add_argument("--causal", action="store_true", help="Single-pass causal filtering")
    p.add_argument("--jobs", type=int, help="Concurrent trials")
    p.add_argument("--encoding", choices=["csv", "f32le"], default="csv")
    p.add_argument("--out", help="Output bundle directory")

    p = sub.add_parser("features", parents=[common], help="Window and extract feature sets")
    p.add_argument("--bundle", help="Input bundle (filtered, or raw to filter first)")
    p.add_argument("--features", help="Comma list of emg-td, emg-tdpsd, acc-med, acc-rms")
    p.add_argument("--window-ms", type=float, help="Window length (default: 200)")
    p.add_argument("--increment-ms", type=float, help="Window increment (default: 100)")
    p.add_argument("--zc-threshold", type=float, help="ZC/SSC dead zone (default: 0)")
    p.add_argument("--notch", type=int, choices=[50, 60], help="Mains frequency when filtering")
    p.add_argument("--jobs", type=int, help="Concurrent trials")
    p.add_argument("--out", help="Feature store directory")

    p = sub.add_parser("eval", parents=[common], help="Run classification tasks")
    p.add_argument("--bundle", help="Feature store, or bundle to featurize in memory")
    p.add_argument("--task", help="Comma list of position, gesture, sequential")
    p.add_argument("--features", help="Comma list of feature sets, pos+gesture pairs, or all")
    p.add_argument("--classifier", help="Comma list of lda, qda, knn[:k], rf[:trees]")
    p.add_argument("--gesture-classifier", help="Different family for the sequential gesture stage")
    p.add_argument("--subset", help="Gesture subset name (HCI-A/B/C) or JSON file")
    p.add_argument("--exclude", help="Comma list of gesture names to drop (default: NM)")
    p.add_argument("--window-ms", type=float)
    p.add_argument("--increment-ms", type=float)
    p.add_argument("--notch", type=int, choices=[50, 60])
    p.add_argument("--seed", type=int, help="Base seed (default: 0)")
    p.add_argument("--jobs", type=int, help="Concurrent (subject, fold) cells")
    p.add_argument("--out", help="Results directory")

    p = sub.add_parser("train", parents=[common], help="Fit one model on all rows of a subject")
    p.add_argument("--bundle", help="Feature store or bundle")
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--target", choices=["gesture", "position"], default="gesture")
    p.add_argument("--position", type=int, help="Only rows of this position")
    p.add_argument("--features", help="Feature set (default: first configured)")
    p.add_argument("--classifier", help="Classifier (default: first configured)")
    p.add_argument("--subset", help="Gesture subset name or JSON file")
    p.add_argument("--exclude", help="Comma list of gesture names to drop")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--model", required=True, help="Output model JSON")

    p = sub.add_parser("report", parents=[common], help="Render tables from result JSON")
    p.add_argument("results", nargs="*", help="Result JSON files or directories")
    p.add_argument("--reference", action="store_true", help="Show published accuracies and deviation")
    p.add_argument("--confusion", choices=["gesture", "all", "none"], default="gesture")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"), help="Paired test of two result files")
    p.add_argument("--csv", help="Directory for plot-ready CSV exports")
    p.add_argument("--bundle", help="Bundle for --trial export")
    p.add_argument("--trial", help="Trial S,G,P,R to export as CSV")
    p.add_argument("--output", "-o", help="Markdown file (default: stdout)")

    return parser


COMMANDS = {
    "convert": cmd_convert,
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "features": cmd_features,
    "eval": cmd_eval,
    "train": cmd_train,
    "report": cmd_report,
}


def run(argv: Optional[list[str]] = None) -> int:
    """Parse argv, run one subcommand, return the exit code."""
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.verbose, args.quiet)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except BenchError as e:
        print(e.one_line(), file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"error: internal: {' '.join(str(e).split())}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
