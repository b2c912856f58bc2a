import pytest

from commands.common import DataOptions, ModelOptions
from conftest import tiny_model_config
from models.schemas import NormStats
from services import config_service
from services.errors import ConfigError


class Options(ModelOptions, DataOptions):
    epochs: int = 200


def test_parse_key_values_skips_comments_and_normalises_keys():
    text = "# run settings\nepochs = 30\n\n--mixup-alpha=0  # off\nmanifolds=e,s,g\n"
    assert config_service.parse_key_values(text) == {"epochs": "30", "mixup_alpha": "0", "manifolds": "e,s,g"}


def test_parse_key_values_reports_line():
    with pytest.raises(ConfigError, match="run.cfg:2"):
        config_service.parse_key_values("epochs=1\nnonsense\n", "run.cfg")


def test_precedence_cli_over_file_over_env_over_defaults(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=30\ndepth=3\n")
    env = {"MMA_EPOCHS": "5", "MMA_DEPTH": "2", "MMA_HEADS": "8", "MMA_DIM": "64"}
    options = config_service.resolve_options(Options, {"depth": 1}, cfg, defaults={"dim": 32, "seed": 9},
                                             environ=env)
    assert options.depth == 1
    assert options.epochs == 30
    assert options.heads == 8
    assert options.dim == 64
    assert options.seed == 9
    assert options.patch_size == 4


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochz=30\n")
    with pytest.raises(ConfigError, match="epochz"):
        config_service.resolve_options(Options, {}, cfg, environ={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        config_service.resolve_options(Options, {}, tmp_path / "absent.cfg", environ={})


def test_invalid_value_becomes_config_error():
    with pytest.raises(ConfigError, match="precision"):
        config_service.resolve_options(Options, {"precision": 16}, environ={})


def test_env_precision_string_is_accepted():
    assert config_service.resolve_options(Options, {}, environ={"MMA_PRECISION": "32"}).precision == 32


def test_inconsistent_model_rejected():
    options = config_service.resolve_options(Options, {"dim": 10, "heads": 4}, environ={})
    with pytest.raises(ConfigError, match="divisible"):
        options.to_model_config(num_classes=4)


def test_model_config_flat_round_trip():
    cfg = tiny_model_config("s,g", "late", pool="mean_pool")
    flat = config_service.flatten_model_config(cfg)
    assert flat["attention.manifolds"] == "s,g"
    assert flat["model.pool"] == "mean_pool"
    assert config_service.model_config_from_flat(flat) == cfg


def test_model_config_from_bad_flat():
    with pytest.raises(ConfigError):
        config_service.model_config_from_flat({"model.image_size": "30", "model.patch_size": "4"})


def test_stats_round_trip():
    stats = NormStats(mean=(0.1, 0.2, 1 / 3), std=(0.5, 0.25, 2 / 3))
    assert config_service.stats_from_flat(config_service.flatten_stats(stats)) == stats
    assert config_service.stats_from_flat({}) is None


def test_write_config_file_is_readable(tmp_path):
    path = config_service.write_config_file(tmp_path / "d.cfg", {"size": 16, "noise": 0.1, "flag": True})
    assert config_service.read_config_file(path) == {"size": "16", "noise": "0.1", "flag": "true"}
