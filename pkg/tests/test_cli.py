import json
import subprocess
import sys

import pytest

from nnstokes.cli import ConfigError, main, parse_config, solve_plan


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config(study="mms")
        assert cfg.n == 64
        assert cfg.model["family"] == "carreau" and cfg.model["p"] == 1.5
        assert cfg.weight["q"] == 2.0
        assert cfg.levels == [16, 32, 64]

    def test_study_grid_defaults(self):
        assert parse_config(study="roughness").n == 128
        assert parse_config(study="weights-check").n == 256

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"grid": {"n": 32}, "model": {"p": 1.8}}))
        cfg = parse_config(path, {"grid": {"n": 16}}, study="mms")
        assert cfg.n == 16 and cfg.model["p"] == 1.8

    def test_shipped_model_name(self):
        cfg = parse_config(flags={"model": {"name": "newtonian"}}, study="mms")
        assert cfg.stress_model().p == 2.0

    @pytest.mark.parametrize("flags", [
        {"model": {"p": 1.0}},
        {"model": {"mu": 0.0}},
        {"weight": {"q": 1.0}},
        {"weight": {"s0": 2.0}},
        {"grid": {"n": 2}},
        {"forcing": {"center": [0.0, 0.5]}},
        {"solver": {"backend": "gmres"}},
        {"model": {"name": "bingham"}},
        {"grid": {"levels": [32]}},
    ])
    def test_rejections(self, flags):
        with pytest.raises(ConfigError):
            parse_config(flags=flags, study="mms")

    def test_unknown_key_path(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"solver": {"tolerance": 1e-8}}))
        with pytest.raises(ConfigError, match="solver.tolerance"):
            parse_config(path, study="mms")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        with pytest.raises(ConfigError, match="malformed"):
            parse_config(path, study="mms")

    def test_unknown_tolerance(self):
        with pytest.raises(ConfigError):
            parse_config(flags={"tolerances": {"nope": 1}}, study="mms")

    def test_plan(self):
        cfg = parse_config(flags={"grid": {"n": 32}}, study="roughness")
        plan = solve_plan(cfg)
        assert len(plan) == 3 * 2 and {p["grid"] for p in plan} == {16, 32}


class TestMain:
    def test_dry_run(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["truncation", "--out", str(out), "--dry-run"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert len(data["solves"]) == 7
        assert not out.exists()

    def test_pass_and_outputs(self, tmp_path):
        out = tmp_path / "mms"
        assert main(["mms", "--grid", "16", "--out", str(out)]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"config.json", "report.json", "summary.txt", "manifests.json", "mms.csv", "mms.gp"} <= names
        assert any(n.endswith(".png") for n in names)

    def test_rerun_needs_force(self, tmp_path):
        out = tmp_path / "mms"
        args = ["mms", "--grid", "8", "--out", str(out), "--no-figures"]
        assert main(args) == 0
        assert main(args) == 3
        assert main(args + ["--force"]) == 0

    def test_foreign_directory(self, tmp_path):
        out = tmp_path / "o"
        assert main(["mms", "--grid", "8", "--out", str(out), "--no-figures"]) == 0
        assert main(["inhomogeneous", "--grid", "16", "--out", str(out), "--force"]) == 3

    def test_nonempty_directory(self, tmp_path):
        (tmp_path / "stray.txt").write_text("x")
        assert main(["mms", "--grid", "8", "--out", str(tmp_path)]) == 3

    def test_config_rejection(self, tmp_path):
        assert main(["mms", "--p", "1.0", "--out", str(tmp_path / "o")]) == 3
        assert main(["mms", "--mu", "0", "--out", str(tmp_path / "o")]) == 3

    def test_negative_control_fails(self, tmp_path):
        out = tmp_path / "o"
        code = main(["constitutive-check", "--mu-inf", "0.5", "--out", str(out), "--no-figures"])
        assert code == 1
        assert "FAIL" in (out / "summary.txt").read_text()

    def test_solver_failure(self, tmp_path):
        out = tmp_path / "o"
        code = main(["mms", "--model", "capped", "--grid", "8", "--out", str(out), "--no-figures"])
        assert code == 2
        assert (out / "failed_runs.json").exists()

    def test_module_entry_point(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "nnstokes.cli", "mms", "--dry-run",
                              "--out", str(tmp_path / "o")], capture_output=True, text=True)
        assert res.returncode == 0 and "planned solves" in res.stderr
