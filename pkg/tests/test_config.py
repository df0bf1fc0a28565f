import pytest
from hypothesis import given, settings, strategies as st

from fedshield.config import (SCHEMA, ConfigError, ExperimentConfig, format_config, load_config, override,
                              parse_config, validate_config)
from fedshield.ddp import HeadroomError


def test_defaults_are_valid():
    assert validate_config(ExperimentConfig()) == ExperimentConfig()


def test_echo_lists_every_key():
    text = format_config(parse_config("mode = DP_ONLY\n"))
    keys = [line.split("=")[0].strip() for line in text.splitlines() if line and not line.startswith("#")]
    assert keys == list(SCHEMA)


def test_echo_round_trips():
    cfg = parse_config("mode = DP_SECAGG_DDP\ndp.deltas = 1e-10, 1e-5\nddp.mu = 2.5\nbudget.rho = 0.81\n")
    assert parse_config(format_config(cfg)) == cfg


def test_min_aggregation_above_report_goal_names_both_fields():
    with pytest.raises(ConfigError) as err:
        parse_config("federation.report_goal = 10\nfederation.min_aggregation = 11\n")
    assert "federation.min_aggregation" in str(err.value) and "federation.report_goal" in str(err.value)


def test_wrapping_ddp_config_rejected_citing_headroom():
    # 16-bit field: 20 * (4096 * 1 + 1) = 81940 > 32768
    text = "mode = DP_SECAGG_DDP\nddp.bits = 16\nddp.scale = 4096\nfederation.report_goal = 20\n"
    with pytest.raises(HeadroomError, match="headroom"):
        parse_config(text)


def test_headroom_ignored_without_secagg():
    parse_config("mode = DP_ONLY\nddp.bits = 16\nddp.scale = 4096\n")


@pytest.mark.parametrize("text,match", [
    ("nonsense = 1\n", "unknown key"),
    ("seed = 1\nseed = 2\n", "duplicate"),
    ("seed = abc\n", "cannot parse"),
    ("mode = FANCY\n", "mode"),
    ("just text\n", "expected"),
    ("secagg.transcript = maybe\n", "true or false"),
    ("mode = SECAGG_ONLY\nsecagg.threshold = 15\nsecagg.degree = 10\n", "secagg.threshold"),
    ("dp.deltas = 0\n", "dp.deltas"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# hello\n\n  seed = 5  \n", encoding="utf-8")
    assert load_config(p).seed == 5


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/x.cfg")


def test_override_revalidates():
    with pytest.raises(ConfigError):
        override(ExperimentConfig(), min_aggregation=100)


def test_mode_dependent_views():
    cfg = ExperimentConfig(mode="SECAGG_ONLY", ddp_mu=5.0, noise_multiplier=3.0)
    assert cfg.effective_mu == 0.0 and cfg.effective_noise_multiplier == 0.0
    cfg = ExperimentConfig(mode="DP_SECAGG_DDP", ddp_mu=5.0, noise_multiplier=3.0)
    assert cfg.effective_mu == 5.0 and cfg.effective_noise_multiplier == 3.0


@settings(max_examples=100)
@given(st.sampled_from(["BASELINE", "DP_ONLY", "SECAGG_ONLY", "DP_SECAGG_DDP"]), st.integers(2, 100),
       st.integers(1, 100), st.floats(0.01, 10), st.floats(1, 2**20), st.floats(0, 1e5))
def test_validator_accepts_exactly_the_safe_configs(mode, goal, min_agg, clip, scale, mu):
    cfg = ExperimentConfig(mode=mode, population_size=100, report_goal=goal, min_aggregation=min_agg,
                           clip_norm=clip, ddp_scale=scale, ddp_mu=mu)
    problems = []
    if min_agg > goal:
        problems.append("min_aggregation")
    if cfg.uses_secagg:
        n, m = goal, cfg.effective_mu
        if n * (scale * clip + 1) + 6 * (2 * m * n) ** 0.5 >= 2**31:
            problems.append("headroom")
    if problems:
        with pytest.raises((ConfigError, HeadroomError)):
            validate_config(cfg)
    else:
        validate_config(cfg)
