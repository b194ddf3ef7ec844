import pytest

from toolwear.config import ConfigError, load_config, parse_config


def test_defaults():
    cfg = parse_config({})
    assert cfg.input_bins == 513
    arch = cfg.architecture()
    assert arch.channels == (8, 16, 32, 32) and arch.n_total == 350
    assert cfg.train_config().learning_rate == 0.01
    assert cfg.spectrogram.split_fractions == (0.75, 0.10, 0.15)


def test_yaml_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\nscene:\n  n_total: 40\nnn:\n  pool_kind: avg\n  max_epochs: 2\n")
    cfg = load_config(p)
    assert cfg.seed == 3 and cfg.scene.n_total == 40
    assert cfg.architecture().pool_kind == "avg" and cfg.train_config().max_epochs == 2


def test_empty_yaml_is_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p) == parse_config({})


def test_unknown_key_names_path():
    with pytest.raises(ConfigError, match=r"nn\.chanels"):
        parse_config({"nn": {"chanels": [4]}})
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({"bogus": 1})


@pytest.mark.parametrize("data, where", [
    ({"eval": {"window": 4}}, "eval"),
    ({"nn": {"dropout": 1.5}}, "nn.dropout"),
    ({"dsp": {"band": [70e3, 60e3]}}, "dsp"),
    ({"dsp": {"welch_window": 40000}}, "dsp.welch_window"),
    ({"spectrogram": {"split_fractions": [0.5, 0.2, 0.2]}}, "spectrogram"),
    ({"scene": {"sensor_pos": "above"}}, "scene.sensor_pos"),
])
def test_invalid_values(data, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        parse_config(data)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(p)
    p.write_text("a: [1,\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(p)


def test_overrides_revalidate():
    cfg = parse_config({}).with_overrides(**{"nn.pool_kind": "avg", "seed": 9})
    assert cfg.nn.pool_kind == "avg" and cfg.seed == 9
    with pytest.raises(ConfigError):
        cfg.with_overrides(**{"eval.window": 2})


def test_derived_seeds_are_distinct_and_stable():
    a, b = parse_config({}), parse_config({"seed": 1})
    assert a.derived_seed(1) == parse_config({}).derived_seed(1)
    assert len({a.derived_seed(1), a.derived_seed(2), b.derived_seed(1)}) == 3
