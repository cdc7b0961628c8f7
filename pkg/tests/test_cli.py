import json
import math
import subprocess
import sys

import pytest

from halmle import sample_data_path
from halmle.cli import ConfigError, build_config, load_config, main
from halmle.data import write_csv
from halmle.sim import get_dgp

ROLES = "outcome=y;treatment=a;covariates=w1,w2"
FAST = ["--knots", "4", "--V", "3"]


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    ds = get_dgp("DGP-A").sample(120, 7)
    p = tmp_path_factory.mktemp("cli") / "d.csv"
    from halmle.data import Dataset
    write_csv(Dataset(W=ds.W, Y=ds.Y, A=ds.A, covariate_names=("w1", "w2"), treatment_name="a",
                      outcome_name="y", outcome_kind=ds.outcome_kind), p)
    return str(p)


def _run(tmp_path, *args):
    out = tmp_path / "out"
    return main([*args, "--out-dir", str(out)]), out


@pytest.mark.parametrize("command,files", [("fit", ["fit.json"]), ("cv", ["cv.json", "cv_risks.csv"]),
                                           ("estimate", ["estimate.json"]), ("ctmle", ["ctmle.json"])])
def test_data_commands_write_reports(tmp_path, data_file, command, files):
    code, out = _run(tmp_path, command, "--data", data_file, "--roles", ROLES, *FAST)
    assert code == 0
    for f in files:
        assert (out / f).is_file()
    if command != "cv":
        payload = json.loads((out / files[0]).read_text())
        assert payload["schema_version"] == 1 and payload["command"] == command


def test_bootstrap_command(tmp_path, data_file):
    code, out = _run(tmp_path, "bootstrap", "--data", data_file, "--roles", ROLES, "--B", "10", *FAST)
    assert code == 0
    rep = json.loads((out / "bootstrap.json").read_text())["report"]
    assert rep["B"] == 10


def test_simulate_writes_one_row_per_replicate(tmp_path):
    code, out = _run(tmp_path, "simulate", "--dgp", "DGP-A", "--replicates", "2", "--n", "100", *FAST)
    assert code == 0
    lines = (out / "simulate.csv").read_text().splitlines()
    assert len(lines) == 3
    assert "coverage" in json.loads((out / "simulate.json").read_text())["result"]["aggregates"]


def test_rate_command(tmp_path):
    code, out = _run(tmp_path, "rate", "--replicates", "1", "--n-grid", "40,60,90", *FAST)
    assert code == 0
    assert (out / "rate.csv").read_text().startswith("n,mean_error,se_error")


def test_missing_outcome_role(tmp_path, data_file, capsys):
    code, _ = _run(tmp_path, "fit", "--data", data_file, "--roles", "covariates=w1,w2")
    assert code == 2
    assert "outcome" in capsys.readouterr().err


def test_missing_treatment_for_estimate(tmp_path, data_file, capsys):
    code, _ = _run(tmp_path, "estimate", "--data", data_file, "--roles", "outcome=y;covariates=w1,w2", *FAST)
    assert code == 2
    assert "treatment" in capsys.readouterr().err


@pytest.mark.parametrize("args,field", [(["simulate", "--replicates", "0"], "replicates"),
                                        (["simulate", "--dgp", "DGP-Z"], "dgp"),
                                        (["rate", "--n-grid", "100,50,200"], "n_grid"),
                                        (["fit", "--data", "/nonexistent.csv", "--roles", ROLES], "data"),
                                        (["simulate", "--truncate", "0.5,0.1"], "truncate")])
def test_invalid_configuration_exits_2(tmp_path, capsys, args, field):
    code, _ = _run(tmp_path, *args)
    assert code == 2
    assert field in capsys.readouterr().err


def test_config_file_and_flag_override(tmp_path, data_file):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[data]\ndata = {data_file}\nroles = {ROLES}\n[estimation]\nmethod = plugin\nknots = 5\n")
    assert load_config(cfg)["knots"] == 5
    c = build_config(["estimate", "--config", str(cfg), "--knots", "7"])
    assert c.knots == 7 and c.method == "plugin"
    bad = tmp_path / "bad.ini"
    bad.write_text("[x]\nunknown_key = 1\n")
    with pytest.raises(ConfigError, match="unknown_key"):
        load_config(bad)


def test_infinite_tolerance_reports_plugin(tmp_path, data_file):
    _, out = _run(tmp_path, "estimate", "--data", data_file, "--roles", ROLES, "--tol", "inf", *FAST)
    rep = json.loads((out / "estimate.json").read_text())["report"]
    assert rep["diagnostics"]["steps"] == 0
    assert math.isinf(build_config(["estimate", "--data", data_file, "--roles", ROLES, "--tol", "inf"]).tol)


def test_score_preserving_method(tmp_path, data_file):
    code, out = _run(tmp_path, "estimate", "--data", data_file, "--roles", ROLES, "--method", "tmle_preserving",
                     *FAST)
    assert code == 0
    diag = json.loads((out / "estimate.json").read_text())["report"]["diagnostics"]
    assert diag["method"] == "tmle_preserving"
    assert diag["battery_max"] <= 1e-5


def test_console_entry_point_on_bundled_sample(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "halmle.cli", "fit", "--data", str(sample_data_path()),
                           "--roles", ROLES, "--knots", "3", "--V", "2", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("n=20 ")
