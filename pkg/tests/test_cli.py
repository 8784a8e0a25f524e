import json

import pytest
from click.testing import CliRunner

from mimicseg import cli as cli_mod
from mimicseg.experiments import read_csv

TINY = ["--set", "patch_size=4", "--set", "base_width=4", "--set", "mi_dim=8", "--set", "critic_hidden=16",
        "--set", "batch_size=4", "--set", "max_epochs=1", "--set", "warmup_epochs=1", "--set", "sigma=0.25"]


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, args):
    result = runner.invoke(cli_mod.cli, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestCommands:
    def test_synth_and_preprocess(self, runner, tmp_path):
        invoke(runner, ["synth", "--out", str(tmp_path / "raw"), "--n-subjects", "3", "--slices", "2",
                        "--image-size", "16"])
        assert (tmp_path / "raw" / "subj000.nii").exists()
        out = invoke(runner, ["preprocess", "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "c"),
                              "--patch-size", "4", "--image-size", "16"])
        assert "train=" in out.output and (tmp_path / "c" / "meta.json").exists()

    def test_train_then_evaluate(self, runner, tiny_cache, tmp_path):
        run = tmp_path / "t"
        invoke(runner, ["train", "--cache", str(tiny_cache), "--run-dir", str(run), "--preset", "U-Net+MIMIC", *TINY])
        snapshot = json.loads((run / "command.json").read_text())
        assert snapshot["command"] == "train" and snapshot["params"]["config"]["patch_size"] == 4
        assert (run / "history.csv").exists() and (run / "best.pt").exists()
        ev = tmp_path / "e"
        out = invoke(runner, ["evaluate", "--checkpoint", str(run / "best.pt"), "--cache", str(tiny_cache),
                              "--run-dir", str(ev)])
        assert "DSC" in out.output
        (row,) = read_csv(ev / "summary.csv")
        assert set(row) >= {"Methods", "DSC", "mIoU", "HD95", "ASD"}
        assert (ev / "metrics_per_slice.csv").exists() and (ev / "conventions.json").exists()

    def test_run_root_env(self, runner, tiny_cache, tmp_path, monkeypatch):
        monkeypatch.setenv("MIMIC_RUN_ROOT", str(tmp_path / "root"))
        invoke(runner, ["train", "--cache", str(tiny_cache), "--preset", "U-Net", *TINY])
        assert (tmp_path / "root" / "train" / "last.pt").exists()

    def test_mi_probe(self, runner, tmp_path):
        out = invoke(runner, ["mi-probe", "--steps", "3", "--tolerance", "10", "--run-dir", str(tmp_path)])
        rows = read_csv(tmp_path / "mi_probe.csv")
        assert [r["case"] for r in rows] == ["gaussian_rho=0.0", "gaussian_rho=0.5", "gaussian_rho=0.9",
                                            "discrete_table"]
        assert out.output.count("PASS") == 4

    def test_mi_probe_failure_exits_nonzero(self, runner, tmp_path):
        result = runner.invoke(cli_mod.cli, ["mi-probe", "--steps", "1", "--tolerance", "0", "--run-dir", str(tmp_path)])
        assert result.exit_code == 1

    def test_sweep_ablate_plot(self, runner, tiny_cache, tmp_path):
        root = tiny_cache.parent
        invoke(runner, ["sweep", "--cache-root", str(root), "--patch-sizes", "4,8", "--sigmas", "0.25,0.5",
                        "--run-dir", str(tmp_path / "s"), *TINY])
        rows = read_csv(tmp_path / "s" / "sweep.csv")
        assert [r["mode"] for r in rows] == ["baseline", "mimic", "mimic"]
        assert {r["sigma"] for r in rows[1:]} == {"0.25", "0.5"}
        for metric in ("dsc", "miou", "hd95", "asd"):
            assert (tmp_path / "s" / f"sweep_{metric}.png").stat().st_size > 0
        out = invoke(runner, ["plot", "--sweep-csv", str(tmp_path / "s" / "sweep.csv"), "--run-dir", str(tmp_path / "p")])
        assert out.output.count(".png") == 4

        invoke(runner, ["ablate", "--cache", str(tiny_cache), "--run-dir", str(tmp_path / "a"), *TINY])
        rows = read_csv(tmp_path / "a" / "ablation.csv")
        assert [r["Methods"] for r in rows] == ["U-Net", "U-Net+MI", "U-Net+CL", "U-Net+MIMIC"]


class TestErrors:
    def test_missing_cache(self, runner, tmp_path):
        result = runner.invoke(cli_mod.cli, ["train", "--cache", str(tmp_path / "nope")])
        assert result.exit_code != 0

    def test_bad_override(self, runner, tiny_cache, tmp_path):
        result = runner.invoke(cli_mod.cli, ["train", "--cache", str(tiny_cache), "--set", "sigma"])
        assert result.exit_code != 0 and "key=value" in result.output

    def test_package_errors_map_to_exit_2(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        with pytest.raises(SystemExit) as exc:
            cli_mod.main(["train", "--cache", str(tmp_path / "empty"), "--run-dir", str(tmp_path / "r")])
        assert exc.value.code == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, tiny_cache):
        with pytest.raises(SystemExit) as exc:
            cli_mod.main(["train", "--cache", str(tiny_cache), "--set", "nonsense=1"])
        assert exc.value.code == 2

    def test_help(self, runner):
        out = invoke(runner, ["--help"]).output
        for cmd in ("preprocess", "synth", "train", "evaluate", "mi-probe", "sweep", "ablate", "plot"):
            assert cmd in out
