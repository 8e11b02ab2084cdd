try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import pytest

from prune_pipeline import *


def test_defaults():
    c = RunConfig()
    assert (c.epochs, c.batch_size, c.lr, c.momentum, c.weight_decay) == (160, 64, 0.1, 0.9, 1e-4)
    assert c.alpha_grid == (0.3, 0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0)
    assert c.max_rollbacks == 2 and c.acceptance_epsilon == 0.0
    assert c.effective_retrain_epochs == 160
    assert RunConfig(retrain_epochs=5).effective_retrain_epochs == 5


@pytest.mark.parametrize(
    "changes",
    [
        {"alpha_grid": (0.5, 0.3)},
        {"alpha_grid": ()},
        {"alpha_grid": (0.0, 1.0)},
        {"lr": 0.0},
        {"momentum": 1.0},
        {"acceptance_epsilon": -0.1},
        {"gate_split": "test"},
        {"lr_drop_points": (1.5,)},
        {"epochs": -1},
    ],
)
def test_invalid_values(changes):
    with pytest.raises(ConfigError):
        RunConfig(**changes)


def test_load_config_with_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'epochs = 12\nalpha_grid = [0.5, 1.0]\ngate_split = "train"\nseed = 4\n',
        encoding="utf-8",
    )
    c = load_config(path, {"epochs": "3", "snapshot_epochs": "0,1,3", "seed": None})
    assert c.epochs == 3
    assert c.alpha_grid == (0.5, 1.0)
    assert c.gate_split == "train"
    assert c.snapshot_epochs == (0, 1, 3)
    assert c.seed == 4


def test_override_parses_comma_lists_and_bools():
    c = apply_overrides(RunConfig(), {"alpha-grid": "0.3,0.8", "keep_pruned_weights": "true"})
    assert c.alpha_grid == (0.3, 0.8)
    assert c.keep_pruned_weights is True


@pytest.mark.parametrize(
    "content",
    ["bogus = 1\n", "epochs = 1.5\n", "[train]\nepochs = 3\n", "epochs = \n"],
)
def test_bad_config_files(tmp_path, content):
    path = tmp_path / "bad.toml"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")


def test_dump_config_reloads_equal(tmp_path):
    config = RunConfig(epochs=7, retrain_epochs=2, alpha_grid=(0.5, 2.0), snapshot_epochs=(0, 7))
    path = dump_config(config, tmp_path / "effective_config.toml")
    with open(path, "rb") as f:
        assert tomllib.load(f)["epochs"] == 7
    assert load_config(path) == config
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[0] == "epochs = 7"


def test_dump_config_omits_unset_retrain_epochs(tmp_path):
    path = dump_config(RunConfig(), tmp_path / "c.toml")
    assert "retrain_epochs" not in path.read_text(encoding="utf-8")
    assert load_config(path).retrain_epochs is None


def test_dump_config_unwritable_path(tmp_path):
    with pytest.raises(DataFormatError, match="missing"):
        dump_config(RunConfig(), tmp_path / "missing" / "effective_config.toml")
    with pytest.raises(DataFormatError):
        dump_config(RunConfig(), tmp_path)
