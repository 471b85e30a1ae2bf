import json

import pytest

from svolterra import cli


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfigValidation:
    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"kernel": \n  nope}')
        with pytest.raises(cli.ConfigError, match=r":2:"):
            cli._load_config(str(path))

    def test_missing_field_path_precise(self, tmp_path):
        cfg = write_config(tmp_path, {"backward": {"problem": "caputo"}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "backward"])
        assert rc == 2

    def test_unknown_problem_rejected(self, tmp_path):
        cfg = write_config(tmp_path, {
            "tree": {"N": 4, "T": 1.0},
            "backward": {"problem": "nope"}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "backward"])
        assert rc == 2


class TestKernelCommand:
    def test_report_written(self, tmp_path):
        cfg = write_config(tmp_path, {
            "kernel": {"name": "doubly_singular", "alpha": 0.2, "beta": 0.0,
                       "eps_grid": [1.0, 0.5]}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "kernel"])
        assert rc == 0
        data = json.loads(
            (tmp_path / "kernel_doubly_singular.json").read_text())
        assert data["outputs"]["classification"]["in_scriptL2"] is True
        assert data["tool_version"]


class TestBackwardCommand:
    def test_solve_and_dump(self, tmp_path):
        cfg = write_config(tmp_path, {
            "tree": {"N": 4, "T": 1.0},
            "backward": {"problem": "fractional_generator",
                         "alpha": 0.7, "tol": 1e-11}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "backward"])
        assert rc == 0
        assert (tmp_path / "backward_fractional_generator_Y.csv").exists()
        assert (tmp_path / "backward_fractional_generator_Z.csv").exists()
        data = json.loads(
            (tmp_path / "backward_fractional_generator.json").read_text())
        assert data["residuals"]["m_condition"] < 1e-10

    def test_method_flag(self, tmp_path):
        cfg = write_config(tmp_path, {
            "tree": {"N": 4, "T": 1.0},
            "backward": {"problem": "fractional_generator"}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path),
                       "--method", "block", "backward"])
        assert rc == 0


class TestForwardCommand:
    def test_convergence_study(self, tmp_path):
        cfg = write_config(tmp_path, {
            "tree": {"N": 8, "T": 1.0},
            "forward": {"problem": "fractional_relaxation",
                        "alpha": 0.75, "lam": -1.0,
                        "N_list": [16, 32]}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "forward"])
        assert rc == 0
        lines = (tmp_path / "forward_fractional_relaxation_convergence.csv"
                 ).read_text().strip().splitlines()
        assert lines[0] == "N,sup_error"
        assert len(lines) == 3


class TestDeterminism:
    def test_reports_identical_modulo_timings(self, tmp_path):
        cfg = write_config(tmp_path, {
            "tree": {"N": 4, "T": 1.0},
            "backward": {"problem": "fbm_rl_generator"}})
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert cli.main(["--config", cfg, "--out", str(out1), "--seed", "7",
                         "backward"]) == 0
        assert cli.main(["--config", cfg, "--out", str(out2), "--seed", "7",
                         "backward"]) == 0
        d1 = json.loads((out1 / "backward_fbm_rl_generator.json").read_text())
        d2 = json.loads((out2 / "backward_fbm_rl_generator.json").read_text())
        d1.pop("timings")
        d2.pop("timings")
        assert d1 == d2
        # and the CSV tables byte-identical
        assert (out1 / "backward_fbm_rl_generator_Y.csv").read_bytes() == \
            (out2 / "backward_fbm_rl_generator_Y.csv").read_bytes()


class TestControlCommand:
    def test_lq_report(self, tmp_path):
        cfg = write_config(tmp_path, {
            "tree": {"N": 5, "T": 1.0},
            "control": {"instance": "lq", "steps": 200, "rate": 0.5,
                        "probes": 8}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "control"])
        assert rc == 0
        data = json.loads((tmp_path / "control_lq.json").read_text())
        assert data["outputs"]["duality_gap"] <= 1e-10
        assert data["outputs"]["stationarity_margin"] >= -1e-6

    def test_delay_report(self, tmp_path):
        cfg = write_config(tmp_path, {
            "tree": {"N": 4, "T": 1.0},
            "control": {"instance": "delay_lq", "steps": 60,
                        "rate": 0.4, "probes": 4}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "control"])
        assert rc == 0
        data = json.loads((tmp_path / "control_delay_lq.json").read_text())
        assert data["outputs"]["stationarity_margin"] >= -1e-6


class TestSuiteCommand:
    def test_selected_criteria(self, tmp_path):
        cfg = write_config(tmp_path, {"suite": {"criteria": [4, 5]}})
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "suite"])
        assert rc == 0
        data = json.loads((tmp_path / "suite.json").read_text())
        assert data["outputs"]["all_passed"] is True
        assert [c["index"] for c in data["outputs"]["criteria"]] == [4, 5]

    def test_exit_code_zero_only_when_passing(self, tmp_path):
        cfg = write_config(tmp_path, {"suite": {"criteria": [5]}})
        assert cli.main(["--config", cfg, "--out", str(tmp_path),
                         "suite"]) == 0
