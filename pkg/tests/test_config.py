import pytest

from config import DEFAULT_CLASSIFIERS, RunConfig, load_run_config
from errors import ConfigError


def test_defaults_without_file():
    cfg = load_run_config(None)
    assert cfg == RunConfig()
    assert cfg.notch_hz == 60
    assert cfg.classifiers == DEFAULT_CLASSIFIERS
    assert cfg.exclude_gestures == ["NM"]


def test_toml_tables_set_fields(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        '[preprocess]\nnotch_hz = 50\ncausal = true\n'
        '[windows]\nwindow_ms = 250\nincrement_ms = 50\n'
        '[eval]\nclassifiers = ["lda", "knn:3"]\nseed = 7\n'
    )
    cfg = load_run_config(path)
    assert cfg.notch_hz == 50
    assert cfg.causal is True
    assert cfg.window_ms == 250.0
    assert cfg.classifiers == ["lda", "knn:3"]
    assert cfg.seed == 7
    assert cfg.increment_ms == 50.0


def test_flags_override_file_values(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[eval]\nseed = 7\njobs = 2\n")
    cfg = load_run_config(path).with_overrides(seed=11, jobs=None)
    assert cfg.seed == 11
    assert cfg.jobs == 2


@pytest.mark.parametrize("text, fragment", [
    ("[nope]\nx = 1\n", "unknown config table"),
    ("[eval]\ncolour = 1\n", "unknown key"),
    ("[eval]\nseed = \"seven\"\n", "expected integer"),
    ("[preprocess]\nnotch_hz = 55\n", "50 or 60"),
    ("[windows]\nwindow_ms = 100\nincrement_ms = 200\n", "exceeds"),
    ("not toml at all [", "invalid TOML"),
])
def test_invalid_config_files(tmp_path, text, fragment):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=fragment):
        load_run_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "absent.toml")


def test_unknown_override_key():
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(colour="red")


def test_error_one_line():
    err = ConfigError("first line\n   second line")
    assert err.one_line() == "error: config: first line second line"
