import json
import subprocess
import sys
from pathlib import Path
from textwrap import dedent

import pytest

from mlocpoly.cli import emit_report, parse_and_dispatch

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL_BIAS = dedent("""
    [study]
    kind = "bias-check"
    n = 200
    replications = 8
    x = [0.25]
    base_seed = 4

    [loss]
    family = "squared"

    [dgp]
    kind = "iid-additive"
    seed = 1
    components = [{type = "sine"}]

    [dgp.error]
    family = "gaussian"
    scale = 0.4

    [fit]
    p = 1
    kernel = "epanechnikov"
    h = 0.15
""")


def write_config(tmp_path, text, name="study.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestConfigErrors:
    def test_missing_file(self, tmp_path, capsys):
        code = parse_and_dispatch(
            ["bias", "--config", str(tmp_path / "none.toml")])
        assert code == 2
        assert "config file not found" in capsys.readouterr().err

    def test_invalid_toml(self, tmp_path, capsys):
        path = write_config(tmp_path, "study = [broken")
        assert parse_and_dispatch(["bias", "--config", path]) == 2
        assert "not valid TOML" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path, SMALL_BIAS.replace(
            "base_seed = 4", "base_seed = 4\nreps = 3"))
        assert parse_and_dispatch(["bias", "--config", path]) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_kind_subcommand_mismatch(self, tmp_path, capsys):
        path = write_config(tmp_path, SMALL_BIAS)
        assert parse_and_dispatch(["additive", "--config", path]) == 2
        assert "does not match" in capsys.readouterr().err

    def test_bad_loss_family(self, tmp_path, capsys):
        path = write_config(tmp_path, SMALL_BIAS.replace(
            'family = "squared"', 'family = "hinge"', 1))
        assert parse_and_dispatch(["bias", "--config", path]) == 2
        assert "unknown family" in capsys.readouterr().err


class TestFitCommand:
    def test_csv_table(self, tmp_path, capsys):
        code = parse_and_dispatch(
            ["fit", "--config", str(CONFIGS / "fit.toml"),
             "--out", str(tmp_path)])
        assert code == 0
        out_path = tmp_path / "fit.csv"
        assert str(out_path) in capsys.readouterr().out
        text = out_path.read_text()
        lines = text.splitlines()
        assert lines[0] == "x1,m_hat,d1,converged"
        assert len(lines) == 42
        assert text.endswith("\n")
        assert all(row.split(",")[3] in {"true", "false"} for row in lines[1:])

    def test_values_round_trip_at_full_precision(self, tmp_path):
        parse_and_dispatch(["fit", "--config", str(CONFIGS / "fit.toml"),
                            "--out", str(tmp_path)])
        rows = (tmp_path / "fit.csv").read_text().splitlines()[1:]
        for row in rows:
            x1, m_hat = row.split(",")[:2]
            # %.17g survives a parse -> print cycle exactly
            assert format(float(m_hat), ".17g") == m_hat
            assert 0.0 <= float(x1) <= 1.0


class TestStudyRuns:
    def test_small_bias_check_passes(self, tmp_path):
        path = write_config(tmp_path, SMALL_BIAS)
        code = parse_and_dispatch(
            ["bias", "--config", path, "--out", str(tmp_path),
             "--format", "json"])
        assert code == 0
        payload = json.loads((tmp_path / "bias-check.json").read_text())
        assert payload["pass_flags"]["bias_within_3se"] is True
        assert payload["config"]["base_seed"] == 4

    def test_single_replication_fails_with_nan_se(self, tmp_path):
        path = write_config(tmp_path, SMALL_BIAS.replace(
            "replications = 8", "replications = 1"))
        code = parse_and_dispatch(
            ["bias", "--config", path, "--out", str(tmp_path)])
        assert code == 1
        text = (tmp_path / "bias-check.csv").read_text()
        header, row = text.splitlines()[:2]
        se_col = header.split(",").index("se")
        assert row.split(",")[se_col] == "NaN"

    def test_single_replication_json_uses_null(self, tmp_path):
        path = write_config(tmp_path, SMALL_BIAS.replace(
            "replications = 8", "replications = 1"))
        parse_and_dispatch(["bias", "--config", path, "--out", str(tmp_path),
                            "--format", "json"])
        payload = json.loads((tmp_path / "bias-check.json").read_text())
        assert payload["cells"][0]["se"] is None

    def test_identity_suite_exit_zero(self, tmp_path):
        code = parse_and_dispatch(
            ["identity", "--config", str(CONFIGS / "identity.toml"),
             "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "identity-suite.csv").exists()

    def test_boundary_window_is_runtime_error(self, tmp_path, capsys):
        text = SMALL_BIAS.replace('kind = "bias-check"',
                                  'kind = "stochastic-clt"')
        text = text.replace("x = [0.25]", "x = [0.05]")
        text = text.replace("h = 0.15", "h = 0.2")
        path = write_config(tmp_path, text)
        assert parse_and_dispatch(
            ["mc", "--config", path, "--out", str(tmp_path)]) == 3
        assert "runtime error" in capsys.readouterr().err


class TestDeterminism:
    def run_mc(self, path, out, extra=()):
        code = parse_and_dispatch(
            ["mc", "--config", path, "--out", str(out),
             "--format", "json", "--seed", "5", *extra])
        assert code == 0
        return (out / "bias-check.json").read_bytes()

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        path = write_config(tmp_path, SMALL_BIAS)
        a = self.run_mc(path, tmp_path / "a")
        b = self.run_mc(path, tmp_path / "b")
        assert a == b

    def test_threads_do_not_leak_into_output(self, tmp_path):
        path = write_config(tmp_path, SMALL_BIAS)
        a = self.run_mc(path, tmp_path / "a")
        b = self.run_mc(path, tmp_path / "b", extra=("--threads", "2"))
        assert a == b

    def test_json_is_canonical(self, tmp_path):
        path = write_config(tmp_path, SMALL_BIAS)
        text = self.run_mc(path, tmp_path / "a").decode()
        payload = json.loads(text)
        assert json.dumps(payload, indent=2, sort_keys=True) + "\n" == text


class TestEmit:
    def test_empty_cells_give_empty_table(self, tmp_path):
        target = tmp_path / "empty.csv"
        emit_report({"cells": []}, "csv", target)
        assert target.read_text() == "\n"

    def test_declared_columns_survive_empty_cells(self, tmp_path):
        target = tmp_path / "empty.csv"
        emit_report({"columns": ["x1", "m_hat"], "cells": []}, "csv", target)
        assert target.read_text() == "x1,m_hat\n"

    def test_write_is_atomic(self, tmp_path):
        target = tmp_path / "out.csv"
        emit_report({"cells": [{"a": 1.0}]}, "csv", target)
        emit_report({"cells": [{"a": 2.0}]}, "csv", target)
        assert target.read_text() == "a\n2\n"
        assert list(tmp_path.iterdir()) == [target]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "mlocpoly.cli", "identity",
         "--config", str(CONFIGS / "identity.toml"), "--out", str(tmp_path)],
        capture_output=True, text=True, cwd=str(CONFIGS.parent))
    assert proc.returncode == 0
    assert "identity-suite.csv" in proc.stdout
