import pytest

from ctstop.config import build_config, expand_sweep, parse_config, read_config_file
from ctstop.errors import ConfigError, ConfigTypeError, InvalidValue, MissingRequired, UnknownKey


def test_defaults():
    cfg = parse_config()
    assert cfg.reward.cost_b == 0.5
    assert cfg.noise.eta == 0.05
    assert cfg.reward.max_steps == 20
    assert cfg.geometry.grid == 240
    assert cfg.optimizer.learning_rate == 1e-4
    assert cfg.optimizer.weight_decay == 1e-5
    opt = cfg.optimizer
    assert (opt.actor_weight, opt.critic_weight, opt.terminal_weight, opt.entropy_weight) == (1.0, 0.5, 1.0, 0.01)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("reward:\n  cost_b: 0.8\n  max_steps: 12\nseed: 3\n")
    cfg = parse_config(str(path), overrides={"reward.cost_b": 0.3, "seed": None})
    assert cfg.reward.cost_b == 0.3
    assert cfg.reward.max_steps == 12
    assert cfg.seed == 3


def test_key_value_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# sweep-free settings\nreward.cost_b = 0.65\ngeometry.grid = 64  # small\nvariant = naive\n")
    cfg = parse_config(str(path))
    assert cfg.reward.cost_b == 0.65
    assert cfg.geometry.grid == 64
    assert cfg.variant == "naive"


def test_unknown_key_suggests_closest():
    with pytest.raises(UnknownKey) as e:
        build_config({"reward.cots_b": 0.5})
    assert e.value.suggestion == "reward.cost_b"
    assert "reward.cost_b" in str(e.value)
    with pytest.raises(UnknownKey) as e:
        build_config({"reward.consts_b": 0.5})
    assert e.value.suggestion == "reward.cost_b"


def test_type_errors():
    with pytest.raises(ConfigTypeError):
        build_config({"reward.max_steps": "many"})
    with pytest.raises(ConfigTypeError):
        build_config({"train.decide_before_acquire": 1})


def test_string_values_are_parsed():
    cfg = build_config({}, overrides={"reward.max_steps": "7", "network.channels": "[4, 8]"})
    assert cfg.reward.max_steps == 7
    assert cfg.network.channels == (4, 8)


def test_eval_requires_checkpoint():
    with pytest.raises(MissingRequired):
        build_config({"subcommand": "eval"})
    assert build_config({"subcommand": "eval", "paths.checkpoint": "net.pt"}).paths.checkpoint == "net.pt"


def test_validation_rejects_bad_values():
    with pytest.raises(ValueError):
        build_config({"reward.cost_b": 0.0})
    with pytest.raises(ValueError):
        build_config({"network.channels": [6, 12], "network.groups": 4})


def test_environment_fills_cache_dir(monkeypatch):
    monkeypatch.setenv("CTSTOP_CACHE_DIR", "/data/ct-cache")
    assert build_config({}).paths.cache_dir == "/data/ct-cache"


def test_sweep_expands_scalar_lists_only():
    runs = expand_sweep({"reward.cost_b": [0.2, 0.5], "noise.eta": [0.03, 0.05, 0.07], "network.channels": [4, 8]})
    assert len(runs) == 6
    assert {(r["reward.cost_b"], r["noise.eta"]) for r in runs} == {
        (b, e) for b in (0.2, 0.5) for e in (0.03, 0.05, 0.07)
    }
    assert all(r["network.channels"] == [4, 8] for r in runs)


def test_nested_and_dotted_sections_flatten(tmp_path):
    path = tmp_path / "mixed.yaml"
    path.write_text("train:\n  episodes: 10\neval.mode: greedy\n")
    assert read_config_file(str(path)) == {"train.episodes": 10, "eval.mode": "greedy"}


def test_paths_must_not_be_empty():
    with pytest.raises(InvalidValue):
        build_config({"paths.out_dir": ""})


def test_section_errors_are_configuration_errors():
    with pytest.raises(ConfigError) as e:
        build_config({"baseline.n_per_shape": 0})
    assert isinstance(e.value, ValueError)
    assert e.value.exit_code == 2


def test_malformed_yaml_is_a_type_error(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("reward: [0.5\n")
    with pytest.raises(ConfigTypeError):
        read_config_file(str(path))
    with pytest.raises(ConfigTypeError):
        build_config({}, overrides={"network.channels": "[4, 8"})
