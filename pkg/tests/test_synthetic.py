from dataclasses import replace

import numpy as np
import pytest

from conftest import small_config
from dataset_model import ModalityKind, save_bundle, validate
from errors import ConfigError
from synthetic import (
    band_noise,
    describe,
    generate,
    generate_trial,
    preset,
    ramp,
    subject_perturbation,
    with_kappa,
)


def _trial_medians(dataset):
    """Whole-trial ACC median per axis, one row per trial."""
    return np.stack([np.median(t.stream(ModalityKind.ACC).samples, axis=1) for t in dataset.trials])


def _plugin_mutual_information(labels, values, bins=4):
    """Plug-in MI in bits between integer labels and a quantile-binned value."""
    edges = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1])
    binned = np.searchsorted(edges, values)
    _, label_codes = np.unique(labels, return_inverse=True)
    joint = np.zeros((label_codes.max() + 1, bins))
    np.add.at(joint, (label_codes, binned), 1)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (px @ py)[nz])))


# ============================================================================
# Presets
# ============================================================================

def test_preset_sizes():
    bio = preset("bio-like")
    hci = preset("hci-like")
    assert bio.trial_count == 12 * 7 * 5 * 10 == 4200
    assert hci.trial_count == 20 * 40 * 6 == 4800
    assert bio.acc_axes == 6 and hci.acc_axes == 36
    assert bio.has_positions and not hci.has_positions
    assert bio.kappa == 0.0 and hci.kappa == 1.0


def test_scale_keeps_at_least_two():
    bio = preset("bio-like", scale=0.25)
    hci = preset("hci-like", scale=0.25)
    assert (bio.subjects, bio.repetitions) == (3, 2)
    assert (hci.subjects, hci.repetitions) == (5, 2)
    assert len(bio.gesture_ids) == 7 and len(hci.gesture_ids) == 40


def test_unknown_preset_and_bad_scale():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("emg-only")
    with pytest.raises(ConfigError):
        preset("bio-like", scale=0)


def test_config_checks():
    config = preset("bio-like")
    with pytest.raises(ConfigError, match="distinct"):
        replace(config, activation=np.ones_like(config.activation))
    with pytest.raises(ConfigError, match="kappa"):
        with_kappa(config, 1.5)
    with pytest.raises(ConfigError, match="unit vectors"):
        replace(config, position_orientations=2 * config.position_orientations)
    with pytest.raises(ConfigError, match="duplicate"):
        replace(config, gesture_ids=(1, 1, 2, 3, 4, 5, 6))


def test_rest_gesture_has_no_activation():
    config = preset("bio-like")
    rest = config.gesture_ids.index(0)
    assert config.gesture_names[0] == "NM"
    assert np.all(config.activation[rest] == 0)
    assert np.all(config.activation[np.arange(len(config.gesture_ids)) != rest] > 0)


def test_with_kappa_and_override():
    assert with_kappa(preset("bio-like"), 0.5).kappa == 0.5
    assert preset("hci-like", kappa=0.0).kappa == 0.0
    assert describe(preset("bio-like", seed=4))["seed"] == 4


# ============================================================================
# Signal models
# ============================================================================

def test_band_noise_is_band_limited():
    rng = np.random.default_rng(0)
    x = band_noise(rng, (2, 4000), 2000.0, 20.0, 450.0)
    power = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    freqs = np.fft.rfftfreq(4000, 1 / 2000.0)
    outside = (freqs < 20.0) | (freqs > 450.0)
    assert np.all(power[:, outside] < 1e-12 * power.sum(axis=-1, keepdims=True))
    assert np.allclose(np.sqrt(np.mean(x ** 2, axis=-1)), 1.0)


def test_ramp_shape():
    t = np.linspace(0, 2.0, 201)
    r = ramp(t, 2.0)
    assert r[0] == 0.0
    assert np.all(np.diff(r) >= 0)
    assert np.all(r[t >= 0.5] == 1.0)


def test_subject_perturbation_bounds():
    config = preset("bio-like")
    gains = subject_perturbation(config, 3)
    assert gains.shape == (5, 8)
    assert np.all(np.abs(gains - 1.0) <= config.position_emg_perturbation)
    assert np.array_equal(gains, subject_perturbation(config, 3))
    assert np.all(subject_perturbation(preset("hci-like"), 3) == 1.0)


def test_emg_spectral_mass_stays_in_band(bio_dataset):
    for trial in bio_dataset.trials[::17]:
        emg = trial.stream(ModalityKind.EMG)
        if not np.any(emg.samples):
            continue
        power = np.abs(np.fft.rfft(emg.samples, axis=-1)) ** 2
        freqs = np.fft.rfftfreq(emg.n_samples, 1 / emg.sample_rate_hz)
        outside = power[:, (freqs < 20.0) | (freqs > 450.0)].sum()
        assert outside / power.sum() < 0.05


def test_trial_is_reproducible():
    config = small_config("bio-like")
    a = generate_trial(config, 1, 2, 3, 1)
    b = generate_trial(config, 1, 2, 3, 1)
    assert a.key == b.key == (1, 2, 3, 1)
    for modality in ModalityKind:
        assert np.array_equal(a.stream(modality).samples, b.stream(modality).samples)
    c = generate_trial(config, 1, 2, 3, 2)
    assert not np.array_equal(a.stream(ModalityKind.EMG).samples, c.stream(ModalityKind.EMG).samples)


# ============================================================================
# Datasets
# ============================================================================

def test_generated_datasets_are_valid(bio_dataset, hci_dataset):
    assert validate(bio_dataset) == []
    assert validate(hci_dataset) == []

    assert bio_dataset.subjects == [1, 2]
    assert bio_dataset.position_ids == [0, 1, 2, 3, 4]
    assert bio_dataset.position_names[0] == "P1"
    assert {t.repetition for t in bio_dataset.trials} == {1, 2}
    assert len(bio_dataset.trials) == small_config("bio-like").trial_count

    assert not hci_dataset.has_positions
    assert all(t.position_id is None for t in hci_dataset.trials)


def test_stream_shapes(bio_dataset):
    trial = bio_dataset.trials[0]
    emg, acc = trial.stream(ModalityKind.EMG), trial.stream(ModalityKind.ACC)
    assert emg.samples.shape == (8, 2000)
    assert acc.samples.shape == (6, 148)
    assert abs(emg.duration_s - acc.duration_s) <= 1 / 148.0


def test_output_does_not_depend_on_jobs(tmp_path):
    config = replace(small_config("bio-like"), duration_s=0.5)
    serial = generate(config, jobs=1)
    pooled = generate(config, jobs=4)
    save_bundle(serial, tmp_path / "serial", "f32le")
    save_bundle(pooled, tmp_path / "pooled", "f32le")
    for path in sorted((tmp_path / "serial").rglob("*")):
        if path.is_file():
            twin = tmp_path / "pooled" / path.relative_to(tmp_path / "serial")
            assert path.read_bytes() == twin.read_bytes(), path.name

    other = generate(replace(config, seed=config.seed + 1))
    assert not np.array_equal(serial.trials[0].stream(ModalityKind.EMG).samples,
                              other.trials[0].stream(ModalityKind.EMG).samples)


def test_positions_separate_in_accelerometer(bio_dataset):
    medians = _trial_medians(bio_dataset)
    positions = np.array([t.position_id for t in bio_dataset.trials])
    grand = medians.mean(axis=0)
    between = within = 0.0
    for p in np.unique(positions):
        group = medians[positions == p]
        centre = group.mean(axis=0)
        between += len(group) * np.sum((centre - grand) ** 2)
        within += np.sum((group - centre) ** 2)
    assert between / within > 10


def test_accelerometer_carries_no_gesture_without_coupling():
    config = replace(preset("bio-like", seed=11), subjects=4, repetitions=10, duration_s=0.5)
    assert config.kappa == 0.0
    dataset = generate(config)
    assert len(dataset.trials) == 1400
    medians = _trial_medians(dataset)
    gestures = np.array([t.gesture_id for t in dataset.trials])
    for axis in range(medians.shape[1]):
        assert _plugin_mutual_information(gestures, medians[:, axis]) < 0.05


def test_coupling_moves_accelerometer_with_gesture():
    config = replace(preset("hci-like", seed=2), subjects=1, repetitions=1, duration_s=0.5)
    coupled = generate(config)
    uncoupled = generate(with_kappa(config, 0.0))
    spread_coupled = _trial_medians(coupled).std(axis=0).mean()
    spread_uncoupled = _trial_medians(uncoupled).std(axis=0).mean()
    assert spread_coupled > 3 * spread_uncoupled
