import json
import subprocess
import sys

import pytest

from paramdefense.bench.cli import main
from paramdefense.bench.config import parse_config
from paramdefense.errors import ConfigError

BASE = """
[task]
kind = synth_moons
count = 120
noise = 0.1

[model]
sizes = 2, 8, 2

[train]
epochs = 3
lr = 0.2

[run]
seeds = 0, 1
"""

DEFENSE = """
[defense]
K = 2
epsilon = 0.05
p = inf
"""

SWEEP = """
[sweep.multi_step]
epsilon = 0, 0.05
K = 3

[sweep.gaussian]
sigma = 0.02

[quantize]
bits = 4, 8

[probe]
epsilon = 0.05
K = 3

[eta]
k = 3, 5
samples = 2000

[bound]
hessian = 1, 3
gradient = 1, 0.5
epsilon = 0.1, 0.05
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(BASE + DEFENSE + SWEEP)
    return path


def run(*args):
    return main([str(a) for a in args])


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'epoch'"):
            parse_config("[train]\nepoch = 3\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[trainer]\nepochs = 3\n")

    def test_unknown_sweep_method(self):
        with pytest.raises(ConfigError):
            parse_config("[sweep.dropout]\nrate = 0.1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="epochs"):
            parse_config("[train]\nepochs = many\n")

    def test_defaults_and_lists(self):
        cfg = parse_config(BASE + SWEEP)
        assert cfg.section("train")["momentum"] == 0.0
        assert cfg.seeds == [0, 1]
        assert cfg.sweep["multi_step"] == {"epsilon": [0.0, 0.05], "K": [3]}


class TestCommands:
    def test_train_and_defend(self, config, tmp_path):
        out = tmp_path / "o"
        assert run("train", "--config", config, "--out", out) == 0
        assert run("defend", "--config", config, "--out", out, "--seed", 1) == 0
        report = json.loads((out / "defend_seed1.json").read_text())
        assert len(report["epochs"]) == 3
        assert report["config"]["defense"]["K"] == 2
        assert (out / "train_seed0.ckpt").exists() and (out / "train_seed1.ckpt").exists()

    def test_outputs_byte_identical_across_runs(self, config, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run("train", "--config", config, "--out", out) == 0
            ckpt = out / "train_seed0.ckpt"
            for cmd in ("probe", "layer-probe", "quantize-eval"):
                assert run(cmd, "--config", config, "--out", out, "--checkpoint", ckpt) == 0
            assert run("eta-stats", "--config", config, "--out", out) == 0
            assert run("bound-check", "--config", config, "--out", out) == 0
            assert run("report", "--config", config, "--out", out, "--sweep", out / "sweep.csv") == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert outs[0].keys() == outs[1].keys()
        for name in outs[0]:
            assert outs[0][name] == outs[1][name], name
        assert len(outs[0]["sweep.csv"].decode().splitlines()) == 1 + 3 * 2 * 2

    def test_ttest_values(self, capsys):
        assert run("ttest", "--values", 96.34, 0.076, 94.46, 0.164, 3) == 0
        res = json.loads(capsys.readouterr().out)["tests"][0]
        assert round(res["t"], 2) == 18.01 and res["df"] == 4 and res["significant"]

    def test_ttest_consumes_sweep_csv(self, config, tmp_path, capsys):
        out = tmp_path / "t"
        assert run("train", "--config", config, "--out", out) == 0
        for seed in (0, 1):
            sub = out / f"s{seed}"
            assert run("probe", "--config", config, "--out", sub, "--checkpoint", out / f"train_seed{seed}.ckpt") == 0
        capsys.readouterr()
        assert run("ttest", "--a", out / "s0" / "sweep.csv", "--b", out / "s1" / "sweep.csv", "--metric", "loss") == 0
        tests = json.loads(capsys.readouterr().out)["tests"]
        assert {t["method"] for t in tests} == {"multi_step", "gaussian"}

    def test_exit_code_config_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nepoch = 3\n")
        assert run("train", "--config", bad) == 2
        assert run("defend", "--config", bad.with_name("missing.ini")) == 2

    def test_exit_code_data_error(self, config, tmp_path):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"nope")
        assert run("probe", "--config", config, "--out", tmp_path, "--checkpoint", junk) == 3
        csv_cfg = tmp_path / "csv.ini"
        (tmp_path / "empty.csv").write_text("")
        csv_cfg.write_text(f"[task]\nkind = csv\npath = {tmp_path / 'empty.csv'}\n")
        assert run("train", "--config", csv_cfg, "--out", tmp_path) == 3

    def test_exit_code_divergence(self, tmp_path):
        cfg = tmp_path / "div.ini"
        cfg.write_text(BASE.replace("lr = 0.2", "lr = 1e8").replace("epochs = 3", "epochs = 30"))
        with pytest.warns(RuntimeWarning):
            assert run("train", "--config", cfg, "--out", tmp_path) == 4

    def test_defend_without_section(self, tmp_path):
        cfg = tmp_path / "nodef.ini"
        cfg.write_text(BASE)
        assert run("defend", "--config", cfg, "--out", tmp_path) == 2

    def test_console_script_help(self):
        res = subprocess.run([sys.executable, "-m", "paramdefense.bench.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for cmd in ("train", "defend", "probe", "layer-probe", "quantize-eval", "eta-stats", "bound-check", "ttest",
                    "report"):
            assert cmd in res.stdout
