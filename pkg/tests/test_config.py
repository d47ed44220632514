import pytest

from latentflow.config import (
    DEFAULTS,
    RunConfig,
    parse_config,
    serialize_config,
)
from latentflow.errors import ConfigError


class TestDefaults:
    def test_paper_style_presets(self):
        cfg = RunConfig()
        assert cfg["sampler.p_latent"] == 0.4
        assert cfg["sampler.mu_latent"] == -1.2
        assert cfg["sampler.sigma_latent"] == 1.0
        assert cfg["sampler.mu_pixel"] == -0.8
        assert cfg["sampler.sigma_pixel"] == 0.8
        assert cfg["sampler.beta_max"] == 0.25
        assert cfg["sampler.early_frac"] == 0.1
        assert cfg["train.beta1"] == 0.9
        assert cfg["train.beta2"] == 0.95
        assert cfg["model.class_drop"] == 0.1
        assert cfg["sample.steps"] == 50
        assert cfg["sample.solver"] == "heun"

    def test_t_clip_resolution(self):
        assert RunConfig().t_clip() == pytest.approx(1 / 3)
        cascaded = RunConfig({"train.regime": "cascaded"})
        assert cascaded.t_clip() == 0.05
        explicit = RunConfig({"train.t_clip": "0.2"})
        assert explicit.t_clip() == 0.2

    def test_target_std_auto(self):
        assert RunConfig().target_std() is None
        assert RunConfig({"normalize.target_std": "0.485"}).target_std() == 0.485


class TestParsing:
    def test_roundtrip_fixed_point(self):
        text = serialize_config(RunConfig({"train.lr": 0.001, "model.depth": 4}))
        cfg1 = parse_config(text)
        text2 = serialize_config(cfg1)
        assert text == text2
        assert parse_config(text2) == cfg1

    def test_comments_and_blanks(self):
        cfg = parse_config("# hello\n\ntrain.batch = 64\n  # indented comment\n")
        assert cfg["train.batch"] == 64

    def test_types_coerced(self):
        cfg = parse_config(
            "train.unconditional = true\ntrain.lr = 1e-3\nmodel.depth = 3\n"
        )
        assert cfg["train.unconditional"] is True
        assert cfg["train.lr"] == 0.001
        assert cfg["model.depth"] == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("train.momentum = 0.9\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("train.batch = many\n")
        with pytest.raises(ConfigError):
            parse_config("train.unconditional = maybe\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("just a line\n")

    def test_override(self):
        cfg = RunConfig().override({"train.epochs": 3})
        assert cfg["train.epochs"] == 3
        with pytest.raises(ConfigError):
            cfg.override({"nope": 1})

    def test_guidance_interval_parse(self):
        cfg = RunConfig({"guide.interval.latent": "0.06:1.0"})
        assert cfg.guidance_interval("latent") == (0.06, 1.0)
        assert cfg.guidance_interval("pixel") == (0.0, 1.0)
        with pytest.raises(ConfigError):
            RunConfig({"guide.interval.pixel": "half"}).guidance_interval("pixel")

    def test_every_default_survives_roundtrip(self):
        text = serialize_config(RunConfig())
        cfg = parse_config(text)
        for key in DEFAULTS:
            assert cfg[key] == RunConfig()[key], key
