import json
import subprocess
import sys

import pytest
from click.testing import CliRunner

from ircsim.cli import _seeds, main


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def common(small_files, out, style="proposed"):
    return ["--model", small_files / f"{style}.ircmodel", "--data", small_files / "test.ircdata",
            "--config", small_files / "config.json", "--seeds", "0,1", "--out", out]


def test_seed_parsing():
    assert _seeds("0..3") == (0, 1, 2, 3)
    assert _seeds("4,2") == (4, 2)
    assert _seeds(None) == tuple(range(10))


def test_simulate(small_files, tmp_path):
    r = invoke("simulate", *common(small_files, tmp_path))
    assert r.exit_code == 0, r.output
    assert r.output.startswith("accuracy ") and "2 seeds" in r.output
    rep = json.loads((tmp_path / "simulate.json").read_text())
    assert rep["seeds"] == [0, 1]


def test_sweep_and_tolerance(small_files, tmp_path):
    r = invoke("sweep-wl", *common(small_files, tmp_path), "--voltages", "0.44")
    assert r.exit_code == 0, r.output
    r = invoke("sweep-wl", *common(small_files, tmp_path), "--sigmas", "0.42,0.44")
    assert r.exit_code == 0 and "2 sweep points" in r.output
    r = invoke("tolerance", *common(small_files, tmp_path), "--extras", "1")
    assert r.exit_code == 0 and "+0:" in r.output and "+1:" in r.output


def test_calibrate_then_simulate(small_files, tmp_path):
    r = invoke("calibrate", *common(small_files, tmp_path), "--calib-data", small_files / "calib.ircdata")
    assert r.exit_code == 0, r.output
    r = invoke("simulate", *common(small_files, tmp_path), "--bias-table", tmp_path / "bias_table.json")
    assert r.exit_code == 0, r.output


def test_irdrop_validate(tmp_path):
    r = invoke("irdrop-validate", "--cases", 10, "--out", tmp_path)
    assert r.exit_code == 0 and "p95" in r.output


def test_make_fixture_refuses_overwrite(tmp_path):
    r = invoke("make-fixture", "--out", tmp_path / "fx")
    assert r.exit_code == 0, r.output
    assert (tmp_path / "fx" / "proposed.ircmodel").exists()
    r = invoke("make-fixture", "--out", tmp_path / "fx")
    assert r.exit_code != 0 and "refusing" in r.output


def test_errors_exit_nonzero(small_files, tmp_path):
    r = invoke("simulate", *common(small_files, tmp_path), "--style", "baseline")
    assert r.exit_code != 0
    r = invoke("simulate", "--model", tmp_path / "missing.ircmodel")
    assert r.exit_code == 2


@pytest.mark.parametrize("args,code", [(["simulate", "--seeds", "1,1"], 1), (["bogus"], 2)])
def test_console_script_exit_codes(small_files, tmp_path, args, code):
    cmd = [sys.executable, "-c", "from ircsim.cli import run; run()", *args]
    if args[0] == "simulate":
        cmd += ["--model", str(small_files / "proposed.ircmodel"), "--data", str(small_files / "test.ircdata"),
                "--out", str(tmp_path)]
    p = subprocess.run(cmd, capture_output=True, text=True)
    assert p.returncode == code
    if code == 1:
        assert p.stderr.startswith("error: ")
