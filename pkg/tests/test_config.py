import pytest

from mfglearn.config import config_from_dict, parse_config
from mfglearn.errors import ConfigError


def test_empty_config_gives_defaults():
    cfg = config_from_dict({})
    assert cfg.model.rho == 0.05
    assert cfg.grid.n_a == 200


def test_minimal_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[model]\nrho = 0.04\n")
    assert parse_config(path).model.rho == 0.04


@pytest.mark.parametrize(
    "data, key",
    [
        ({"model": {"nu": -1.0}}, "model.nu"),
        ({"model": {"foo": 1}}, "model.foo"),
        ({"model": {"income": {"kind": "two_state", "rate_up": 0}}}, "model.income.rate_up"),
        ({"discrete": {"discount": 1.5}}, "discrete.discount"),
        ({"grid": {"n_a": "many"}}, "grid.n_a"),
    ],
)
def test_errors_name_the_key(data, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.key == key
    assert key in str(info.value)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_hash_survives_toml_round_trip(tmp_path):
    cfg = config_from_dict({"model": {"rho": 0.04}, "discrete": {"m0": [0.5, 0.5]}})
    path = tmp_path / "c.toml"
    path.write_text(cfg.to_toml())
    again = parse_config(path)
    assert again.hash() == cfg.hash()
    assert again.with_overrides(**{"model.rho": 0.03}).hash() != cfg.hash()


def test_overrides_skip_none():
    cfg = config_from_dict({})
    assert cfg.with_overrides(**{"run.seed": None}).hash() == cfg.hash()
    assert cfg.with_overrides(**{"run.seed": 4}).run.seed == 4
