import subprocess
import sys

import pytest

from mmgsim.cli import main
from mmgsim.scenario import DEFAULT_SCENARIO


def test_validate_default():
    assert main(["validate", str(DEFAULT_SCENARIO)]) == 0


def test_validate_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(DEFAULT_SCENARIO.read_text().replace("[ratings]", "[ratingz]"))
    assert main(["validate", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "ratingz" in err and "ratings.p_mppt_w" in err


def test_missing_file_is_config_error(tmp_path):
    assert main(["validate", str(tmp_path / "nope.cfg")]) == 1


def test_run_writes_csv(tmp_path, capsys):
    assert main(["run", str(DEFAULT_SCENARIO), "--out", str(tmp_path), "--horizon", "0.05"]) == 0
    assert len((tmp_path / "telemetry.csv").read_text().splitlines()) == 52
    assert "VUF before control" in capsys.readouterr().out


def test_run_quiet(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), "--horizon", "0.01", "--quiet"]) == 0
    assert capsys.readouterr().out == ""


def test_bad_horizon(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--horizon", "-1"]) == 1


def test_unknown_flag_prints_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--bogus"])
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path):
    text = DEFAULT_SCENARIO.read_text().replace("model = z", "model = p")
    text = text.replace("    7.0 enable_rpc", "    0.01 set_load balanced 2000000 0")
    cfg = tmp_path / "collapse.cfg"
    cfg.write_text(text)
    assert main(["run", str(cfg), "--out", str(tmp_path), "--horizon", "0.02", "--quiet"]) == 2


def test_fixture_vuf(capsys):
    assert main(["fixture", "vuf", "--target", "4.3"]) == 0
    out = capsys.readouterr().out
    assert "extra_a_p_w = 1681.50" in out and "4.3000 %" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mmgsim", "validate", str(DEFAULT_SCENARIO)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
