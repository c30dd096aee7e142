import pytest

from steerlab.config import ConfigError, RunConfig, config_from_dict, load_config


def test_defaults():
    cfg = config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.screen.coherence_floor == 0.9
    assert cfg.screen.omega_cap == 16.0
    assert cfg.sae.expansion == 8
    assert cfg.simulate.n_games == 250


def test_yaml_load(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 4\nscreen:\n  coherence_floor: 0.8\n  omega_cap: 10\nsimulate:\n  opponent: {kind: wsls}\n")
    cfg = load_config(p)
    assert cfg.seed == 4
    assert cfg.screen.coherence_floor == 0.8
    assert cfg.screen.omega_cap == 10.0 and isinstance(cfg.screen.omega_cap, float)
    assert cfg.simulate.opponent == {"kind": "wsls"}


def test_seed_flows_into_training_configs():
    cfg = config_from_dict({"seed": 7})
    assert cfg.lm_train().seed == 7
    assert cfg.sae_train().seed == 7


@pytest.mark.parametrize(
    "raw",
    [
        {"nope": 1},
        {"screen": {"omega_cp": 3}},
        {"train": {"seed": 3}},
        {"screen": 5},
        {"seed": -1},
        {"seed": "one"},
        {"workers": 0},
        {"screen": {"grid_points": 1.5}},
        {"screen": {"last_position_only": "yes"}},
        {"corpus": {"teacher_mix": [0.5]}},
        {"corpus": {"teacher_mix": [0.9, 0.9]}},
        {"simulate": {"player": "wsls"}},
        [1, 2],
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_empty_file_is_defaults(tmp_path):
    p = tmp_path / "e.yaml"
    p.write_text("")
    assert load_config(p) == RunConfig()


def test_hash_ignores_workers_and_out():
    a = config_from_dict({"seed": 1})
    b = config_from_dict({"seed": 1, "workers": 8, "out": "elsewhere"})
    c = config_from_dict({"seed": 2})
    d = config_from_dict({"seed": 1, "screen": {"tail_threshold": 0.5}})
    assert a.hash() == b.hash()
    assert len({a.hash(), c.hash(), d.hash()}) == 3
    assert len(a.hash()) == 12


def test_to_dict_is_json_ready():
    import json

    d = RunConfig().to_dict()
    assert json.loads(json.dumps(d)) == d
    assert "seed" not in d["train"] and "seed" not in d["sae"]


def test_shipped_default_config_matches_defaults():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    assert load_config(root / "default.yaml") == RunConfig()
    for p in sorted(root.glob("*.yaml")):
        load_config(p)
