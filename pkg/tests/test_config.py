"""Tests for run configuration loading and overrides."""

from __future__ import annotations

from pathlib import Path

import pytest

from bevlab.config import (
    RESOLVED_CONFIG_NAME,
    RunConfig,
    apply_setting,
    coerce,
    load_config,
    parse_config_text,
)
from bevlab.errors import ValidationError


class TestDefaults:
    def test_defaults_validate(self):
        cfg = RunConfig()
        cfg.validate()
        assert cfg.icd.pool_size == 6
        assert cfg.bench.lengths == (1024, 4096, 16384, 65536)
        assert cfg.train.ablate_pool_sizes == (3, 6, 9)
        assert (cfg.train.lr_schedule, cfg.train.tau_warmup_steps, cfg.train.tau_lr_scale) == ("cosine", 50, 0.01)

    def test_environment_fallbacks(self, monkeypatch, tmp_path):
        monkeypatch.setenv("BEVLAB_SEED", "17")
        monkeypatch.setenv("BEVLAB_THREADS", "3")
        monkeypatch.setenv("BEVLAB_OUT", str(tmp_path))
        monkeypatch.setenv("BEVLAB_LOG_LEVEL", "DEBUG")
        cfg = RunConfig()
        assert (cfg.seed, cfg.threads, cfg.out_dir, cfg.log_level) == (17, 3, tmp_path, "DEBUG")


class TestCoerce:
    def test_types_follow_current_value(self):
        assert coerce("true", False, "k") is True
        assert coerce("off", True, "k") is False
        assert coerce("7", 1, "k") == 7
        assert coerce("0.5", 1.0, "k") == 0.5
        assert coerce("/tmp/x", Path("."), "k") == Path("/tmp/x")
        assert coerce("32, 64", (1, 2), "k") == (32, 64)
        assert coerce("axial", "flat", "k") == "axial"

    def test_bad_values(self):
        with pytest.raises(ValidationError):
            coerce("maybe", False, "k")
        with pytest.raises(ValidationError):
            coerce("1.5", 1, "k")


class TestSettings:
    def test_section_key(self):
        cfg = RunConfig()
        apply_setting(cfg, "icd.pool_size", "9")
        apply_setting(cfg, "clfm.rope", "axial")
        apply_setting(cfg, "seed", "5")
        assert (cfg.icd.pool_size, cfg.clfm.rope, cfg.seed) == (9, "axial", 5)

    @pytest.mark.parametrize("key", ["icd.nope", "nosuch.pool_size", "icd", "bogus"])
    def test_unknown_keys(self, key):
        with pytest.raises(ValidationError):
            apply_setting(RunConfig(), key, "1")

    def test_parse_sections_and_comments(self):
        cfg = RunConfig()
        text = "seed = 3  # top level\n\n[train]\nsteps = 10\n[bench]\nlengths = 32,64\n"
        parse_config_text(cfg, text)
        assert (cfg.seed, cfg.train.steps, cfg.bench.lengths) == (3, 10, (32, 64))

    def test_parse_errors(self):
        with pytest.raises(ValidationError, match="unknown section"):
            parse_config_text(RunConfig(), "[model]\n")
        with pytest.raises(ValidationError, match="key = value"):
            parse_config_text(RunConfig(), "[icd]\npool_size 6\n")


class TestLoadConfig:
    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[icd]\npool_size = 3\ntau_init = 0.5\n")
        cfg = load_config(path, ["icd.pool_size=9"])
        assert cfg.icd.pool_size == 9
        assert cfg.icd.tau_init == 0.5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(tmp_path / "absent.cfg")

    def test_malformed_override(self):
        with pytest.raises(ValidationError):
            load_config(None, ["icd.pool_size"])

    def test_resolved_round_trip(self, tmp_path):
        cfg = load_config(None, ["clfm.rope=axial", "bench.lengths=16,32", "icd.include_positive=true"])
        cfg.out_dir = tmp_path / "out"
        path = cfg.write_resolved(tmp_path)
        assert path.name == RESOLVED_CONFIG_NAME
        assert load_config(path) == cfg


class TestValidate:
    @pytest.mark.parametrize(
        "override",
        [
            "icd.pool_size=0",
            "log_level=LOUD",
            "threads=0",
            "bench.trials=2",
            "clfm.heads=3",
            "train.momentum=1.0",
            "synth.min_objects=5",
            "icd.tau_init=1000",
            "train.lr_schedule=step",
            "train.tau_warmup_steps=-1",
        ],
    )
    def test_rejects(self, override):
        cfg = load_config(None, [override])
        with pytest.raises(ValidationError):
            cfg.validate()
