import os
import sys
from dataclasses import replace

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dataset_model import Dataset, ModalityKind, SignalStream, TrialRecord  # noqa: E402
from features import FeatureSetKind, FeatureStore, extract_dataset  # noqa: E402
from preprocessing import FilterSettings, WindowSpec, preprocess_dataset  # noqa: E402
from synthetic import generate, preset  # noqa: E402


def make_trial(subject=1, gesture=1, position=1, repetition=1, emg_samples=400, emg_rate=1000.0,
               acc_samples=40, acc_rate=100.0, emg_channels=2, acc_channels=3, seed=0):
    rng = np.random.default_rng(seed)
    return TrialRecord(
        subject, gesture, position, repetition,
        (
            SignalStream(ModalityKind.EMG, emg_rate, rng.standard_normal((emg_channels, emg_samples))),
            SignalStream(ModalityKind.ACC, acc_rate, rng.standard_normal((acc_channels, acc_samples))),
        ),
    )


def make_dataset(subjects=(1,), gestures=(1, 2), positions=(1,), repetitions=(1, 2), **kwargs):
    """Small hand-built dataset; positions=(None,) gives unlabelled trials."""
    trials = []
    seed = 0
    for s in subjects:
        for g in gestures:
            for p in positions:
                for r in repetitions:
                    trials.append(make_trial(s, g, p, r, seed=seed, **kwargs))
                    seed += 1
    gesture_names = {g: f"G{g}" for g in gestures}
    position_names = {p: f"P{p}" for p in positions if p is not None}
    return Dataset("handmade", tuple(trials), gesture_names, position_names)


def build_store(dataset, kinds=tuple(FeatureSetKind), jobs=1):
    """Filter, window and featurize a dataset the way `eval` does in memory."""
    filtered = preprocess_dataset(dataset, 60, FilterSettings(), jobs=jobs)
    window = WindowSpec()
    matrices = extract_dataset(filtered, window, list(kinds), jobs=jobs)
    return FeatureStore(dataset.name, dataset.gesture_names, dataset.position_names, matrices, window)


def small_config(name, **overrides):
    """Smallest preset variant: 2 subjects, 2 repetitions, 1 s trials."""
    config = preset(name, scale=0.1, seed=3)
    return replace(config, duration_s=1.0, **overrides)


@pytest.fixture(scope="session")
def bio_dataset():
    return generate(small_config("bio-like"))


@pytest.fixture(scope="session")
def bio_store(bio_dataset):
    return build_store(bio_dataset).exclude(["NM"])


@pytest.fixture(scope="session")
def hci_dataset():
    return generate(small_config("hci-like"))


@pytest.fixture(scope="session")
def hci_store(hci_dataset):
    return build_store(hci_dataset, kinds=(FeatureSetKind.TD, FeatureSetKind.MED))
