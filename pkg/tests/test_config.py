import logging
import os

import pytest

from fringeforge.cli import build_parser, resolve_run_config
from fringeforge.config import (
    ENV_CONFIG, ENV_THREADS, RunConfig, load_config, read_run_file, setup_logging, worker_threads,
)
from fringeforge.errors import ConfigError


SMALL_YAML = {"dataset": {"n": 20, "size": 32, "seed": 2}, "supernet": {"stages": 2},
              "search": {"lr": 0.02}}


class TestRunFile:
    def test_reads_values_and_lines(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("# toy run\n\nn = 12\nsplit = 0.5, 0.25, 0.25  # fractions\n")
        values, lines = read_run_file(path)
        assert values == {"n": "12", "split": "0.5, 0.25, 0.25"}
        assert lines == {"n": 3, "split": 4}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("n = 3\nsize 64\n")
        with pytest.raises(ConfigError, match=r"run.txt:2"):
            read_run_file(path)

    def test_empty_key(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text(" = 3\n")
        with pytest.raises(ConfigError, match="empty key"):
            read_run_file(path)


class TestRunConfig:
    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match="run.txt:3: unknown config key 'bogus'"):
            RunConfig().update({"bogus": "1"}, source="run.txt", lines={"bogus": 3})

    def test_coercion(self):
        run = RunConfig().update({"n": "12", "l-stages": "3", "crop": "none", "sigma": "0.3",
                                  "split": "0.5,0.25,0.25", "data": "ds"})
        assert run.n == 12
        assert run.l_stages == 3
        assert run.crop is None
        assert run.sigma == 0.3
        assert run.split == (0.5, 0.25, 0.25)
        assert run.data == "ds"

    @pytest.mark.parametrize("key,value", [("n", "12.5"), ("lr", "fast"), ("split", "0.5,0.5")])
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigError, match=key):
            RunConfig().update({key: value})

    def test_from_yaml(self):
        run = RunConfig.from_yaml(SMALL_YAML)
        assert (run.n, run.size, run.seed, run.l_stages) == (20, 32, 2, 2)
        assert run.lr == 0.02

    @pytest.mark.parametrize("values", [{"size": 100}, {"n": 2}, {"sigma": 1.0}, {"lr": 0.0},
                                        {"size": 32, "l_stages": 6}, {"labels": "measured"},
                                        {"repeats": 2}])
    def test_validate(self, values):
        with pytest.raises(ConfigError):
            RunConfig().update(values).validate()

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("n = 7\nseed = 5\n")
        args = build_parser().parse_args(["synth", "--config", str(path), "--n", "9"])
        run = resolve_run_config(args, SMALL_YAML)
        assert run.n == 9
        assert run.seed == 5
        assert run.size == 32

    def test_unknown_key_in_run_file(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("n = 7\nwidth = 3\n")
        args = build_parser().parse_args(["synth", "--config", str(path)])
        with pytest.raises(ConfigError, match=r"run.txt:2"):
            resolve_run_config(args, SMALL_YAML)


class TestEnvironment:
    def test_threads_from_env(self, monkeypatch):
        monkeypatch.setenv(ENV_THREADS, "3")
        assert worker_threads() == 3

    def test_threads_default(self, monkeypatch):
        monkeypatch.delenv(ENV_THREADS, raising=False)
        assert worker_threads() == min(4, os.cpu_count() or 1)
        assert worker_threads(2) == 2

    @pytest.mark.parametrize("raw", ["0", "-1", "many"])
    def test_threads_invalid(self, monkeypatch, raw):
        monkeypatch.setenv(ENV_THREADS, raw)
        with pytest.raises(ConfigError):
            worker_threads()

    def test_load_config_explicit(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("dataset:\n  n: 5\n")
        assert load_config(str(path)) == {"dataset": {"n": 5}}

    def test_load_config_from_env(self, tmp_path, monkeypatch):
        path = tmp_path / "c.yaml"
        path.write_text("bench:\n  repeats: 7\n")
        monkeypatch.setenv(ENV_CONFIG, str(path))
        assert load_config()["bench"]["repeats"] == 7

    def test_default_config_is_found(self, monkeypatch):
        monkeypatch.delenv(ENV_CONFIG, raising=False)
        cfg = load_config()
        assert cfg["supernet"]["stages"] == 4
        assert set(cfg["styles"]) >= {"A", "B"}

    def test_missing_config(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "absent.yaml"))

    def test_config_must_be_mapping(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_setup_logging_writes_file(self, tmp_path):
        log_file = tmp_path / "logs" / "run.log"
        setup_logging({"level": "DEBUG", "file": str(log_file)})
        try:
            logging.getLogger("fringeforge.test").debug("hello from the test")
            for handler in logging.getLogger().handlers:
                handler.flush()
            assert "hello from the test" in log_file.read_text(encoding="utf-8")
        finally:
            for handler in logging.getLogger().handlers:
                handler.close()
            setup_logging({"level": "WARNING"})
