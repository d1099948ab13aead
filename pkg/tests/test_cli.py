"""Tests for the command line interface."""

import json
import shutil
import subprocess

import pytest

from steinfed.cli import build_parser, main
from steinfed.metrics import read_metrics_csv


def write_config(tmp_path, out_dir, seed=0):
    data = {
        "method": "dsvgd",
        "seed": seed,
        "out_dir": str(out_dir),
        "particles": 10,
        "experiment": {
            "kind": "mixture",
            "prior": {"kind": "uniform", "lo": -10, "hi": 10},
            "agents": [
                [{"weight": 1.0, "mean": 1.0, "variance": 4.0}],
                [{"weight": 1.0, "mean": -2.0, "variance": 1.0}],
            ],
        },
        "protocol": {"update_steps": 2, "distill_steps": 2, "epsilon": 0.2,
                     "epsilon_local": 0.2},
        "learn": {"rounds": 3},
        "unlearn": {"rounds": 2, "early_stop": False},
        "retrain": {"rounds": 2},
        "grid": {"lo": -12.0, "hi": 12.0},
        "forget_agents": [1],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


class TestParser:
    def test_missing_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["learn", "--config", "c.json", "--bogus"])
        assert exc.value.code == 2

    def test_config_flag_required(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["learn"])
        assert exc.value.code == 2


class TestCommands:
    def test_learn_then_eval_and_export(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "runs")
        assert main(["learn", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "dsvgd: 3 rounds" in out
        summary = json.loads(out.strip().splitlines()[-1])
        assert "kl" in summary and "forgot_loss" in summary

        assert main(["eval", "--config", str(cfg)]) == 0
        ev = json.loads(capsys.readouterr().out)
        assert ev["method"] == "dsvgd"
        assert ev["round"] == 3
        assert ev["kl"] == summary["kl"]

        assert main(["export-plot-data", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "4 rows" in out
        plot = tmp_path / "runs" / "dsvgd_plot.csv"
        assert plot.exists()
        assert plot.read_text().splitlines()[0] == "round,forgotten_acc,retained_acc,kl,wall_ms"

    def test_full_phase_sequence(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "runs")
        assert main(["learn", "--config", str(cfg)]) == 0
        assert main(["unlearn", "--config", str(cfg)]) == 0
        assert main(["retrain", "--config", str(cfg)]) == 0
        capsys.readouterr()
        for name in ("dsvgd", "forget_svgd", "retrain"):
            assert (tmp_path / "runs" / f"{name}_metrics.csv").exists()
            assert (tmp_path / "runs" / f"{name}_snapshot.txt").exists()

    def test_eval_other_method_via_flag(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "runs")
        main(["learn", "--config", str(cfg)])
        main(["unlearn", "--config", str(cfg)])
        capsys.readouterr()
        assert main(["eval", "--config", str(cfg), "--method", "forget_svgd"]) == 0
        ev = json.loads(capsys.readouterr().out)
        assert ev["method"] == "forget_svgd"

    def test_seed_override_changes_results(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "runs_a")
        main(["learn", "--config", str(cfg), "--seed", "0", "--out", str(tmp_path / "a")])
        main(["learn", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "b")])
        capsys.readouterr()
        ka = read_metrics_csv(tmp_path / "a" / "dsvgd_metrics.csv")[-1].kl
        kb = read_metrics_csv(tmp_path / "b" / "dsvgd_metrics.csv")[-1].kl
        assert ka != kb

    def test_out_override_places_artifacts(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "ignored")
        assert main(["learn", "--config", str(cfg), "--out", str(tmp_path / "elsewhere")]) == 0
        capsys.readouterr()
        assert (tmp_path / "elsewhere" / "dsvgd_metrics.csv").exists()
        assert not (tmp_path / "ignored").exists()

    def test_missing_config_is_runtime_error(self, tmp_path, capsys):
        code = main(["learn", "--config", str(tmp_path / "nope.json")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert "not found" in err

    def test_unlearn_before_learn_fails_cleanly(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "runs")
        code = main(["unlearn", "--config", str(cfg)])
        assert code == 1
        assert "run learn first" in capsys.readouterr().err

    def test_invalid_config_reports_field_path(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        data = json.loads(write_config(tmp_path, tmp_path / "runs").read_text())
        data["protocol"]["alpha"] = -1.0
        path.write_text(json.dumps(data))
        assert main(["learn", "--config", str(path)]) == 1
        assert "config.protocol.alpha" in capsys.readouterr().err


class TestEntryPoint:
    def test_installed_script_prints_help(self):
        exe = shutil.which("steinfed")
        assert exe is not None, "console script not installed"
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True, timeout=60)
        assert proc.returncode == 0
        assert "learn" in proc.stdout
        assert "unlearn" in proc.stdout
