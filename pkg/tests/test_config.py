from pathlib import Path

import pytest

from gfnlab.config import ConfigError, RunConfig, load_config, make_environment, parse_config

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.cfg"))


def test_defaults_resolve_per_environment():
    cfg = parse_config("[env]\ntype = bitseq\nn = 8\n").resolved()
    assert (cfg.train.lr_policy, cfg.train.lr_log_z, cfg.train.epsilon, cfg.objective.beta) == (1e-4, 1e-3, 0.0005, 3.0)
    cfg = parse_config("").resolved()
    assert (cfg.train.lr_policy, cfg.train.lr_log_z, cfg.train.epsilon, cfg.objective.beta) == (1e-3, 1e-1, 0.0, 1.0)


def test_explicit_values_override_defaults():
    cfg = parse_config("[train]\nlr_policy = 0.05   # inline comment\nexplore = on_policy\nepsilon = 0.3\n").resolved()
    assert cfg.train.lr_policy == 0.05
    assert cfg.train.epsilon == 0.0  # on-policy sampling never mixes in uniform actions


def test_types_and_case_sensitive_keys():
    cfg = parse_config("[env]\nH = 4\nR0 = 0.01\n[train]\nstop_on_convergence = yes\nl1_window = 100_000\n")
    assert cfg.env.H == 4 and cfg.env.R0 == 0.01
    assert cfg.train.stop_on_convergence is True and cfg.train.l1_window == 100_000


def test_all_problems_are_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_config("[env]\nh = 4\ntype = torus\n[train]\niterations = many\nbatch_size = 0\n[extra]\na = 1\n")
    msg = str(info.value)
    for part in ("unknown key 'h'", "type must be one of", "iterations", "batch_size must be >= 1", "unknown section [extra]"):
        assert part in msg


@pytest.mark.parametrize(
    "text",
    [
        "[train]\nepsilon = 2\n",
        "[train]\ntemperature = 0.5\n",
        "[objective]\nsmoothing = -1\n",
        "[env]\ntype = bitseq\nn = 10\nk = 4\n",
        "[env]\nH = 1\n",
        "[model]\ndtype = float16\n",
        "not a config",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_text_round_trip():
    cfg = parse_config("[env]\ntype = bitseq\nn = 8\n[train]\nseed = 7\n").resolved()
    assert parse_config(cfg.to_text()) == cfg
    assert parse_config(RunConfig().to_text()) == RunConfig()


@pytest.mark.parametrize("path", CONFIGS, ids=[p.name for p in CONFIGS])
def test_shipped_configs_parse(path):
    load_config(path).resolved()


def test_make_environment_is_seeded():
    cfg = parse_config("[env]\ntype = bitseq\nn = 8\nk = 2\nseed = 5\n")
    a, b = make_environment(cfg), make_environment(cfg)
    assert a.info["modes"] == b.info["modes"] and a.info["test_set"] == b.info["test_set"]
    assert len(a.info["test_set"]) == 4 * 8
    r = make_environment(parse_config("[env]\ntype = random\nnum_states = 12\n"))
    assert r.spec.num_states == 12
