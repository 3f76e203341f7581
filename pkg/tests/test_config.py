"""Tests for config.py: YAML parsing, strict keys, cross-field checks and resolution."""

from dataclasses import replace

import pytest

from config import RunConfig, check, check_paths, emit_config, load_config, parse_config, resolve
from pipeline.target import default_target
from spin.errors import ConfigError
from spin.schedule import make_schedule


class TestDefaults:
    def test_defaults_are_valid(self):
        cfg = load_config(None)
        assert cfg == RunConfig()
        assert cfg.trainer.iterations == len(cfg.trainer.spin_steps) == len(cfg.loss.beta_scales)

    def test_empty_document_means_defaults(self):
        assert parse_config("") == RunConfig()

    def test_run_dir_prefers_output_dir(self, tmp_path):
        cfg = replace(RunConfig(), output_dir=str(tmp_path / "out"))
        assert cfg.run_dir == tmp_path / "out"


class TestRoundTrip:
    def test_emit_then_parse(self):
        cfg = parse_config("name: tiny\nschedule:\n  T: 6\n  eta: 0.5\ntrainer:\n  batch_size: 8\n")
        assert parse_config(emit_config(cfg)) == cfg

    def test_emit_is_a_fixed_point(self):
        text = emit_config(RunConfig())
        assert emit_config(parse_config(text)) == text

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(emit_config(RunConfig(name="file")), encoding="utf-8")
        assert load_config(path).name == "file"


class TestStrictParsing:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("nmae: typo\n")

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="trainer"):
            parse_config("trainer:\n  batchsize: 8\n")

    def test_wrong_types(self):
        with pytest.raises(ConfigError, match="expected an integer"):
            parse_config("schedule:\n  T: 2.5\n")
        with pytest.raises(ConfigError, match="expected true/false"):
            parse_config("loss:\n  shuffle_pairs: 1\n")
        with pytest.raises(ConfigError, match="expected a list"):
            parse_config("model:\n  hidden: 64\n")
        with pytest.raises(ConfigError, match="expected a mapping"):
            parse_config("trainer: 5\n")

    def test_exponent_strings_become_floats(self):
        cfg = parse_config("trainer:\n  sft_lr: 1e-3\n")
        assert cfg.trainer.sft_lr == 0.001

    def test_non_numeric_string(self):
        with pytest.raises(ConfigError, match="expected a number"):
            parse_config("trainer:\n  sft_lr: fast\n")

    def test_invalid_yaml(self):
        with pytest.raises(ConfigError, match="not valid YAML"):
            parse_config("trainer: [1, 2\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="could not read"):
            load_config(tmp_path / "absent.yaml")


class TestCrossFieldChecks:
    @pytest.mark.parametrize(
        "text,message",
        [
            ("schema_version: 2\n", "schema_version 2"),
            ("loss:\n  variant: best\n", "loss.variant"),
            ("schedule:\n  T: 1\n", "schedule.T"),
            ("schedule:\n  eta: 1.5\n", "schedule.eta"),
            ("schedule:\n  T: 3\n  alpha: [1.0, 0.5]\n", "T\\+1 = 4"),
            ("schedule:\n  T: 3\n  gamma: [1.0]\n", "T = 3"),
            ("schedule:\n  T: 2\n  sigma: [0.0, 0.1]\n", "together with schedule.alpha"),
            ("schedule:\n  T: 2\n  alpha: [1.0, 0.5, 0.04]\n  h: [0.1]\n", "schedule.h needs T = 2"),
            ("trainer:\n  iterations: 0\n", "iterations"),
            ("trainer:\n  iterations: 2\n", "one entry per iteration"),
            ("trainer:\n  sft_steps: -1\n", "non-negative"),
            ("loss:\n  beta_scales: [1.0, 0.0, 2.5]\n", "beta_scales"),
            ("loss:\n  variant: exact\n", "backward"),
            ("trainer:\n  synthetic_fraction: 0.0\n", "synthetic_fraction"),
            ("trainer:\n  test_function_diagnostics: true\n", "stochastic"),
            ("eval:\n  n_samples: 99\n", "must be >= 100"),
            ("eval:\n  best_of: 0\n", "best_of"),
            ("task:\n  n_records: 0\n", "n_records"),
        ],
    )
    def test_rejected(self, text, message):
        with pytest.raises(ConfigError, match=message):
            parse_config(text)

    def test_exact_with_backward_pairs_is_fine(self):
        cfg = parse_config("loss:\n  variant: exact\n  synthetic_pairs: backward\n")
        assert cfg.loss.variant == "exact"

    def test_check_is_idempotent(self):
        cfg = RunConfig()
        assert check(check(cfg)) == cfg


class TestPaths:
    def test_missing_dataset(self, tmp_path):
        cfg = parse_config(f"task:\n  dataset_path: {tmp_path / 'missing.bin'}\n")
        with pytest.raises(ConfigError, match="task.dataset_path"):
            check_paths(cfg)

    def test_existing_paths_pass(self, tmp_path):
        (tmp_path / "dataset.bin").touch()
        cfg = parse_config(f"task:\n  dataset_path: {tmp_path / 'dataset.bin'}\neval:\n  sft_run_dir: {tmp_path}\n")
        check_paths(cfg)


class TestResolve:
    def test_pins_target_and_schedule(self):
        cfg = RunConfig()
        s = make_schedule(cfg.schedule.T, cfg.schedule.shape, cfg.schedule.eta)
        resolved = resolve(cfg, default_target().to_dict(), s.to_dict())
        assert resolved.task.target == default_target().to_dict()
        assert len(resolved.schedule.alpha) == cfg.schedule.T + 1
        assert len(resolved.schedule.gamma) == cfg.schedule.T
        assert resolved.schedule.sigma == s.to_dict()["sigma"]
        assert resolved.schedule.h == s.to_dict()["h"]

    def test_resolved_config_survives_yaml(self):
        cfg = RunConfig()
        s = make_schedule(cfg.schedule.T, cfg.schedule.shape, cfg.schedule.eta)
        resolved = resolve(cfg, default_target().to_dict(), s.to_dict())
        assert parse_config(emit_config(resolved)) == resolved
