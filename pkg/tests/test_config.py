"""Flat key=value config parsing, validation, and fingerprints."""

import pytest

from linflow.config import (ConfigError, RunConfig, load_config,
                            parse_config_text, render_config, write_resolved)


def test_defaults_validate():
    RunConfig().validate()


def test_parse_overrides_and_comments():
    cfg = parse_config_text("""
# a comment
target_linear = 2    # trailing comment
lam = 0.1
reg_enabled = false
objective = mse
bench_sizes = 256,512
""")
    assert cfg.target_linear == 2
    assert cfg.lam == 0.1
    assert cfg.reg_enabled is False
    assert cfg.objective == "mse"
    assert cfg.bench_sizes == (256, 512)
    # untouched keys keep defaults
    assert cfg.n_layers == RunConfig().n_layers


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("targett_linear = 2")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("just some words")


@pytest.mark.parametrize("line,match", [
    ("n_layers = many", "integer"),
    ("lam = abc", "number"),
    ("reg_enabled = maybe", "boolean"),
    ("bench_sizes = a,b", "comma list"),
])
def test_bad_value_types(line, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(line)


@pytest.mark.parametrize("text", [
    "n_layers = 0",
    "d_model = 33",
    "target_linear = 9",
    "objective = sgd",
    "alpha_start = 1\nalpha_end = 2",
    "t_min_clamp = 0",
    "transfer_steps = 0",
    "r_lr = -0.1",
    "ablate_targets = 0,4",
    "bench_sizes = 1024",
])
def test_validation_failures(text):
    cfg = parse_config_text(text)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_render_parse_roundtrip():
    cfg = RunConfig(target_linear=3, lam=0.25, reg_enabled=False,
                    bench_sizes=(64, 128), hedgehog_lr=3e-4)
    again = parse_config_text(render_config(cfg))
    assert again == cfg


def test_fingerprint_tracks_content():
    base = RunConfig()
    assert base.fingerprint() == RunConfig().fingerprint()
    assert base.fingerprint() != RunConfig(seed=1).fingerprint()
    assert len(base.fingerprint()) == 64


def test_load_config_layering(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 5\n")
    base = parse_config_text("target_linear = 2")
    cfg = load_config(p, base)
    assert cfg.seed == 5
    assert cfg.target_linear == 2


def test_write_resolved(tmp_path):
    cfg = RunConfig(seed=3)
    path = tmp_path / "resolved.cfg"
    digest = write_resolved(cfg, path)
    text = path.read_text()
    assert text.startswith(f"# fingerprint {digest}\n")
    assert parse_config_text(text) == cfg
    # resolved file re-fingerprints to the same digest
    assert parse_config_text(text).fingerprint() == digest
