import csv
import re
import subprocess
import sys

import pytest

from fbmlab.cli import DEFAULTS, SUBCOMMANDS, load_config, main
from fbmlab.errors import ConfigError


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_unknown_subcommand_exits_2_with_usage(capsys):
    assert main(["no-such-command"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_exits_2():
    assert main([]) == 2


def test_help_lists_subcommands_and_every_key(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in text
    for sec, keys in DEFAULTS.items():
        for key, (default, _, _) in keys.items():
            assert re.search(rf"^  {re.escape(sec + '.' + key)} +=\s{re.escape(default)}\s", text, re.M), key


def test_unknown_key_is_named_exactly(tmp_path, capsys):
    code = main(["moments", "--out", str(tmp_path), "--set", "fbm.Nsteps=3", "--set", "fbm.N=3"])
    err = capsys.readouterr().err
    assert code == 2
    assert "unknown key fbm.Nsteps" in err and "fbm.N must be a power of two, got 3" in err


def test_config_errors_list_every_field(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[fbm]\nhurst = 0.3\nmethod = magic\nbogus = 1\n[nosuch]\na = 1\n")
    with pytest.raises(ConfigError) as info:
        load_config(str(ini), ["run.paths=zero"])
    joined = "\n".join(info.value.problems)
    for needle in ("unknown key fbm.bogus", "unknown section [nosuch]", "run.paths"):
        assert needle in joined
    with pytest.raises(ConfigError) as info:
        load_config(str(ini))
    joined = "\n".join(info.value.problems)
    assert "fbm.hurst" in joined and "fbm.method" in joined


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["moments", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path)]) == 2


def test_builtin_configs_load():
    for name in ("identity", "rotated", "shear"):
        assert load_config(name)["system"]["name"] == name


def test_override_flags_map_to_keys():
    conf = load_config(None, ["run.seed=9", "fbm.N=64", "fbm.hurst=0.6", "run.paths=7"])
    assert (conf["run"]["seed"], conf["fbm"]["N"], conf["fbm"]["hurst"], conf["run"]["paths"]) == (9, 64, 0.6, 7)


def test_sample_fbm_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["sample-fbm", "--paths", "1", "--seed", "17", "--grid", "16", "--out", str(tmp_path / d)]) == 0
    a, b = (tmp_path / d / "fbm_path0.csv" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert len(_rows(a)) == 17


def test_output_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("FBMLAB_OUTPUT", str(tmp_path / "env"))
    assert main(["sample-fbm", "--paths", "1", "--grid", "8"]) == 0
    assert (tmp_path / "env" / "fbm_path0.csv").exists()


def test_verify_ibp_identity_builtin(tmp_path):
    assert main(["verify-ibp", "--config", "identity", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "verify_ibp.csv")
    ibp = [r for r in rows if r["experiment"] == "gaussian_ibp"]
    assert [r["verdict"] for r in ibp] == ["pass", "observed"]
    assert not any(r["verdict"] == "fail" for r in rows)
    assert (tmp_path / "verify_ibp.json").exists()


def test_integrate_reports_invariants(tmp_path):
    code = main(["integrate", "--config", "shear", "--paths", "3", "--grid", "32", "--out", str(tmp_path),
                 "--set", "flow.dump=true", "--set", "experiment.xs=0.5, 0"])
    assert code == 0
    names = {r["estimator"] for r in _rows(tmp_path / "integrate.csv")}
    assert {"inverse_residual", "frame_residual", "aborted_paths"} <= names
    assert (tmp_path / "trajectory_path2.csv").exists()


def test_failed_verdict_exits_1(tmp_path):
    # a constant test function leaves the rate unidentifiable, which counts as a failed verdict
    code = main(["gradient-scan", "--config", "identity", "--paths", "200", "--grid", "16", "--out", str(tmp_path),
                 "--set", "experiment.f=constant", "--set", "experiment.hursts=0.75",
                 "--set", "experiment.ts=0.25, 0.5"])
    assert code == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fbmlab.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage:" in proc.stderr
