import json
from pathlib import Path

import pytest

from torstab.cli import ConfigError, RunConfig, load_config, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.ini")))
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    cfg.build_profile()
    assert len(cfg.hash) == 16


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[grid]\nn_r = 8\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_bad_values_are_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[grid]\nn_r = eight\n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        RunConfig(a=0.5)
    with pytest.raises(ConfigError):
        RunConfig(profile={"family": "nonsense"})


def test_overrides_change_the_hash():
    base = load_config(CONFIGS / "vacuum.ini")
    same = load_config(CONFIGS / "vacuum.ini")
    other = load_config(CONFIGS / "vacuum.ini", {"seed": 5})
    assert base.hash == same.hash
    assert other.seed == 5 and other.hash != base.hash


def test_selftest_command(tmp_path):
    code = main(["selftest", "--out", str(tmp_path)])
    assert code == 0
    result = json.loads((tmp_path / "selftest.json").read_text())
    assert result["passed"]
    assert "config_hash" in json.loads((tmp_path / "config.json").read_text())


def test_vacuum_assessment_exits_zero(tmp_path):
    cfg = tmp_path / "vac.ini"
    cfg.write_text("[grid]\nn_r = 8\nn_theta = 8\n[profile]\nfamily = vacuum\n[run]\nplots = false\n")
    assert main(["assess-stability", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["verdict"] == "stable"


def test_unstable_assessment_exits_two(tmp_path):
    cfg = tmp_path / "inst.ini"
    cfg.write_text("[grid]\nn_r = 8\nn_theta = 8\n[profile]\nfamily = instability\nk = 0.5\n"
                   "[solver]\npurely_magnetic = true\n[run]\nplots = false\n")
    assert main(["assess-stability", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_scan_writes_csv_and_plot(tmp_path):
    cfg = tmp_path / "scan.ini"
    cfg.write_text("[grid]\nn_r = 8\nn_theta = 8\n[profile]\nfamily = instability\n"
                   "[solver]\npurely_magnetic = true\n[scan]\nk = 0 0.5\n")
    assert main(["scan-k", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "scan.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1].startswith("K,witness_form")
    assert len(lines) == 4
    assert (tmp_path / "scan.png").stat().st_size > 0


def test_bad_config_exits_one_with_error_file(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[grid]\nbogus = 1\n")
    assert main(["selftest", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error"] == "ConfigError"
