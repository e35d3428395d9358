import pytest

from rampwise.config import ConfigError, RunConfig, load_config, module_seed, parse_override, to_dict


def _toml(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return str(p)


def test_defaults_validate():
    cfg = load_config()
    assert cfg == RunConfig()
    wc = cfg.workflow_config()
    assert wc.horizons == (1, 6, 12, 24)
    assert wc.features.wavelet == cfg.wavelet


def test_toml_sections_and_overrides(tmp_path):
    path = _toml(tmp_path, """
seed = 5
[rba]
k_sigma = 2.5
[bandit]
rounds = 7
[workflow]
horizons = [1, 6]
tau_event = 0.6
""")
    cfg = load_config(path, ["rba.rolling_window=96", "bandit.quota=4"], seed=9)
    assert cfg.seed == 9 and cfg.rba.k_sigma == 2.5 and cfg.rba.rolling_window == 96
    assert cfg.bandit.rounds == 7 and cfg.bandit.quota == 4
    wc = cfg.workflow_config()
    assert wc.horizons == (1, 6) and wc.tau_event == 0.6
    assert wc.bandit.seed == module_seed(9, "bandit")


@pytest.mark.parametrize("text", [
    "[rba]\nbogus = 1\n",
    "surprise = 1\n",
    "[workflow]\nrba = {k_sigma = 2}\n",
    "[rba]\nk_sigma = -1\n",
    "[workflow]\nhorizons = [6, 1]\n",
    "[agent]\nsim_threshold = 2\n",
    "not toml [",
])
def test_rejects_invalid(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_toml(tmp_path, text))


def test_override_parsing():
    assert parse_override("a.b=3") == ("a.b", 3)
    assert parse_override("a=[1, 2]") == ("a", [1, 2])
    assert parse_override("name=W3") == ("name", "W3")
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError):
        load_config(overrides=["rba.nope=1"])


def test_module_seeds_split_deterministically():
    assert module_seed(0, "bandit") == module_seed(0, "bandit")
    assert module_seed(0, "bandit") != module_seed(0, "forest")
    assert module_seed(0, "bandit") != module_seed(1, "bandit")


def test_to_dict_round_trip_keys():
    d = to_dict(RunConfig())
    assert {"seed", "rba", "wavelet", "bandit", "agent", "workflow"} <= set(d)
    assert d["agent"]["epsilon_clamp"] == [0.05, 0.6]
