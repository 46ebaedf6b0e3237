import json
import os

import numpy as np
import pytest

from mcu_lab.cli import EXIT_CONFIG, EXIT_INCOMPLETE, EXIT_OK, EXIT_RUNTIME, config_hash, load_config, main

RUN_CFG = """
[experiment]
seed = 0

[scenario]
d = 16
hidden = 16
n_forget = 100
n_retain = 100
pretrain_steps = 150
min_accuracy = none

[unlearn]
K = 2
lr = 0.2
max_steps = 8
threshold = 50

[method.rmu]
loss = rmu

[method.rmu_mcu]
loss = rmu
mcu = true

[attack]
epochs = 3
lr = 0.2
smoothing_window = 2
objectives = rtt_ce, adaptive_rep_mse

[geometry]
n_bins = 4
"""

NTK_CFG = """
[experiment]
seed = 1

[ntk]
sigma2 = 1.0, 0.5, 0.25, 0.125
c_rate = 0.25
T_r = 8
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def data_files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write(tmp, RUN_CFG)
    assert main(["run", "--config", cfg, "--out", str(tmp / "r")]) == EXIT_OK
    return tmp / "r"


class TestSynth:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = write(tmp_path, RUN_CFG)
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
        files = data_files(tmp_path / "a")
        assert set(files) == {"forget_batch.csv", "retain_batch.csv", "task.json"}
        assert files == data_files(tmp_path / "b")

    def test_seed_override(self, tmp_path):
        cfg = write(tmp_path, RUN_CFG)
        main(["synth", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["synth", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
        assert data_files(tmp_path / "a") != data_files(tmp_path / "b")
        assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 5


class TestRun:
    def test_files(self, run_dir):
        names = {p.name for p in run_dir.iterdir()}
        for n in ("summary.json", "model_o.json", "manifest.json", "rmu_trajectory.csv", "rmu_geometry.csv",
                  "rmu_mcu_projector.json", "rmu_attack_rtt_ce.json", "rmu_attack_adaptive_rep_mse_acc.csv"):
            assert n in names

    def test_summary_pairs(self, run_dir):
        summary = json.loads((run_dir / "summary.json").read_text())
        rows = {m["method"]: m for m in summary["methods"]}
        assert set(rows) == {"rmu", "rmu_mcu"}
        assert rows["rmu_mcu"]["label"] == "RMU + MCU"
        for m in rows.values():
            assert set(m["attacks"]) == {"rtt_ce", "adaptive_rep_mse"}
            assert np.isfinite(m["delta"])

    def test_determinism_and_jobs(self, run_dir, tmp_path):
        cfg = write(tmp_path, RUN_CFG)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "again"), "--jobs", "2"]) == EXIT_OK
        assert data_files(run_dir) == data_files(tmp_path / "again")

    def test_manifest_hash(self, run_dir, tmp_path):
        manifest = json.loads((run_dir / "manifest.json").read_text())
        cp = load_config(write(tmp_path, RUN_CFG))
        assert manifest["config_hash"] == config_hash(cp)
        assert manifest["command"] == "run"
        assert "summary.json" in manifest["files"]

    def test_zero_epoch_attack(self, tmp_path):
        text = RUN_CFG.replace("epochs = 3", "epochs = 0").replace("smoothing_window = 2", "smoothing_window = 1")
        assert main(["run", "--config", write(tmp_path, text), "--out", str(tmp_path / "r")]) == EXIT_OK
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert all(m["delta"] == 0 for m in summary["methods"])

    def test_attack_lr_defaults_to_unlearning_lr(self, tmp_path, monkeypatch):
        import mcu_lab.cli as cli
        seen = []
        real = cli.run_attack

        def spy(model_u, model_o, scenario, cfg, **kw):
            seen.append(cfg.lr)
            return real(model_u, model_o, scenario, cfg, **kw)

        monkeypatch.setattr(cli, "run_attack", spy)
        text = RUN_CFG.replace("epochs = 3\nlr = 0.2", "epochs = 2").replace("[method.rmu_mcu]", "[method.rmu_mcu]\nlr = 0.05")
        assert main(["run", "--config", write(tmp_path, text), "--out", str(tmp_path / "r")]) == EXIT_OK
        assert sorted(set(seen)) == [0.05, 0.2]


class TestSimulate:
    def test_outputs(self, tmp_path):
        assert main(["simulate", "--config", write(tmp_path, NTK_CFG), "--out", str(tmp_path / "n")]) == EXIT_OK
        fit = json.loads((tmp_path / "n" / "ntk_fit.json").read_text())
        assert abs(fit["c_pooled"] - 0.25) <= 1e-6
        rows = [l.split(",") for l in (tmp_path / "n" / "ntk_change.csv").read_text().splitlines()[1:]]
        ratio = np.array([float(r[3]) for r in rows])
        s = np.sqrt([1.0, 0.5, 0.25, 0.125])
        np.testing.assert_allclose(ratio, s / s.sum(), rtol=1e-8)
        sim = (tmp_path / "n" / "ntk_sim.csv").read_text().splitlines()
        header = sim[0].split(",")
        # c * sigma^2 * t = 0.25 * 1.0 * 4 = 1
        assert sim[1].split(",")[header.index("recovery_t4")] == "0.632120559"

    def test_deterministic(self, tmp_path):
        cfg = write(tmp_path, NTK_CFG)
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")])
        assert data_files(tmp_path / "a") == data_files(tmp_path / "b")

    def test_spectrum_form(self, tmp_path):
        text = "[experiment]\nseed = 0\n[ntk]\nspectrum = power_law\nspectrum_param = 1.0\nd = 6\n"
        assert main(["simulate", "--config", write(tmp_path, text), "--out", str(tmp_path / "n")]) == EXIT_OK


class TestReport:
    def test_single(self, run_dir, tmp_path):
        assert main(["report", str(run_dir), "--out", str(tmp_path / "rep")]) == EXIT_OK
        lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
        assert lines[0] == "run,method,label,retain_acc,forget_acc,relearn_acc,delta"
        assert len(lines) == 3

    def fake_run(self, root, name, delta):
        d = root / name
        d.mkdir()
        (d / "manifest.json").write_text(json.dumps({"command": "run"}))
        row = {"method": "m", "label": "M", "retain_acc": 0.9, "forget_acc": 0.3,
               "relearn_acc": 0.3 + delta, "delta": delta}
        (d / "summary.json").write_text(json.dumps({"methods": [row]}))
        return d

    def test_sorted_by_delta(self, tmp_path):
        self.fake_run(tmp_path, "a", 0.05)
        self.fake_run(tmp_path, "b", 0.01)
        assert main(["report", str(tmp_path)]) == EXIT_OK
        rows = json.loads((tmp_path / "report.json").read_text())["rows"]
        assert [r["run"] for r in rows] == ["b", "a"]

    def test_corrupt_summary(self, tmp_path, capsys):
        d = self.fake_run(tmp_path, "a", 0.05)
        (d / "summary.json").write_text("{not json")
        assert main(["report", str(tmp_path)]) == EXIT_INCOMPLETE
        assert str(d / "summary.json") in capsys.readouterr().err

    def test_incomplete_listed(self, tmp_path, capsys):
        d = self.fake_run(tmp_path, "a", 0.05)
        (d / "summary.json").unlink()
        assert main(["report", str(tmp_path)]) == EXIT_INCOMPLETE
        assert str(d) in capsys.readouterr().err

    def test_missing_dir(self, tmp_path):
        assert main(["report", str(tmp_path / "nope")]) == EXIT_INCOMPLETE


class TestErrors:
    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_field_named(self, tmp_path, capsys):
        text = RUN_CFG.replace("K = 2", "K = 2\nbogus_field = 1")
        assert main(["run", "--config", write(tmp_path, text), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
        assert "bogus_field" in capsys.readouterr().err

    def test_bad_value_named(self, tmp_path, capsys):
        text = RUN_CFG.replace("lr = 0.2\nmax_steps", "lr = fast\nmax_steps")
        assert main(["run", "--config", write(tmp_path, text), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
        assert "lr" in capsys.readouterr().err

    def test_unparseable(self, tmp_path):
        assert main(["synth", "--config", write(tmp_path, "no section header\n"), "--out", str(tmp_path)]) \
            == EXIT_CONFIG

    def test_unknown_section(self, tmp_path):
        assert main(["synth", "--config", write(tmp_path, RUN_CFG + "\n[extra]\na = 1\n"),
                     "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_invalid_method(self, tmp_path):
        text = RUN_CFG.replace("[method.rmu]\nloss = rmu", "[method.rmu]\nloss = ga\nmcu = true")
        assert main(["run", "--config", write(tmp_path, text), "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    def test_missing_seed(self, tmp_path):
        assert main(["synth", "--config", write(tmp_path, RUN_CFG.replace("seed = 0", "")),
                     "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_ntk(self, tmp_path):
        assert main(["simulate", "--config", write(tmp_path, RUN_CFG), "--out", str(tmp_path / "o")]) \
            == EXIT_CONFIG

    def test_runtime_failure(self, tmp_path):
        text = RUN_CFG.replace("min_accuracy = none", "min_accuracy = 0.999").replace(
            "pretrain_steps = 150", "pretrain_steps = 1")
        assert main(["run", "--config", write(tmp_path, text), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable_out(self, tmp_path):
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        assert main(["synth", "--config", write(tmp_path, RUN_CFG), "--out", str(ro / "x")]) == EXIT_RUNTIME

    def test_out_is_a_file(self, tmp_path):
        (tmp_path / "f").write_text("")
        assert main(["synth", "--config", write(tmp_path, RUN_CFG), "--out", str(tmp_path / "f")]) \
            == EXIT_RUNTIME
