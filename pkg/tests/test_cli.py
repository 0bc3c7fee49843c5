import subprocess
import sys
from pathlib import Path

import pytest

from groupdis import NumericalError
from groupdis.cli import main


def run_cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "groupdis.cli", *args],
                          capture_output=True, text=True, cwd=cwd)


def write_scenario(path, body):
    path.write_text(body)
    return path


FAST = ["--eta", "0.25", "--kh", "3", "--T", "5"]


def read_report(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or "=" not in line:
            continue
        key, val = line.split("=", 1)
        out[key] = val.split()[0]
    return out


def test_solve_meanfield_fast(tmp_path):
    res = run_cli(["solve", "--model", "meanfield", *FAST, "--out", "o"], tmp_path)
    assert res.returncode == 0, res.stderr
    rep = read_report(tmp_path / "o/report_meanfield.txt")
    assert rep["model"] == "meanfield"
    assert 0.0 < float(rep["reserve"]) < 2.0
    assert rep["effective_epsilon"] == "0.25"
    header = (tmp_path / "o/cashflow_meanfield.csv").read_text().splitlines()
    assert any(line.startswith("# version=") for line in header)
    assert any(line.startswith("# scenario=") for line in header)


def test_solve_models_and_conditioning(tmp_path):
    for model in ("classic", "true-n1"):
        res = run_cli(["solve", "--model", model, *FAST, "--out", model], tmp_path)
        assert res.returncode == 0, res.stderr
    res = run_cli(["solve", "--model", "meanfield", *FAST, "--out", "c",
                   "--conditioning", "active"], tmp_path)
    assert res.returncode == 0, res.stderr
    rep = read_report(tmp_path / "c/report_meanfield.txt")
    assert rep["kind"] == "state:active"


def test_health_on_collective_preset_fails_with_hint(tmp_path):
    res = run_cli(["solve", "--model", "health", *FAST, "--out", "o"], tmp_path)
    assert res.returncode == 1
    assert "true-n1" in res.stderr


def test_classic_zero_benefit_reserve_zero(tmp_path):
    scen = write_scenario(tmp_path / "s.toml",
                          'preset = "disability3"\nT = 5.0\n'
                          "payments = { b = 0.0, epsilon = 0.25 }\n")
    res = run_cli(["solve", "--model", "classic", "--eta", "0.25",
                   "--scenario", "s.toml", "--out", "o"], tmp_path)
    assert res.returncode == 0, res.stderr
    assert float(read_report(tmp_path / "o/report_classic.txt")["reserve"]) == 0.0


def test_zero_claim_rates_scenario(tmp_path):
    # without claims the collective term stays at its baseline-free floor, and
    # the classic and true-n1 pipelines agree
    scen = write_scenario(tmp_path / "s.toml",
                          'preset = "disability3"\nT = 5.0\n'
                          "lambda = [0.0, 0.0, 0.0]\n")
    vals = {}
    for model in ("classic", "true-n1"):
        res = run_cli(["solve", "--model", model, "--eta", "0.25", "--kh", "1",
                       "--scenario", "s.toml", "--out", model], tmp_path)
        assert res.returncode == 0, res.stderr
        vals[model] = float(read_report(
            tmp_path / model / f"report_{model.replace('-', '_')}.txt")["reserve"])
    assert vals["classic"] == pytest.approx(vals["true-n1"], abs=1e-12)


def test_byte_identical_outputs(tmp_path):
    args = ["simulate", "--n", "4", "--M", "30", "--seed", "9", "--histogram"]
    for out in ("a", "b"):
        res = run_cli([*args, "--T", "5", "--out", out], tmp_path)
        assert res.returncode == 0, res.stderr
    for name in ("mc_estimate.txt", "pv_histogram.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_dumps(tmp_path):
    res = run_cli(["simulate", "--n", "3", "--M", "5", "--T", "4", "--seed", "2",
                   "--dump-events", "1", "--dump-nu", "1", "--out", "o"], tmp_path)
    assert res.returncode == 0, res.stderr
    events = (tmp_path / "o/events_0.csv").read_text().splitlines()
    assert "time,individual,kind,from,to" in events
    nu = (tmp_path / "o/nu_0.csv").read_text().splitlines()
    assert "time,nu" in nu


def test_estimate_roundtrip(tmp_path):
    res = run_cli(["simulate", "--n", "5", "--M", "1", "--T", "10", "--seed", "3",
                   "--dump-events", "1", "--out", "sim"], tmp_path)
    assert res.returncode == 0, res.stderr
    events = (tmp_path / "sim/events_0.csv").read_text().splitlines()
    rows = [line for line in events if not line.startswith("#")][1:]
    data = tmp_path / "data.csv"
    data.write_text("time,individual,kind,from,to,company,censoring_time\n"
                    + "".join(f"{r},0,10.0\n" for r in rows))
    res = run_cli(["estimate", "--data", "data.csv", "--T", "10", "--out", "est"],
                  tmp_path)
    assert res.returncode == 0, res.stderr
    loglik = (tmp_path / "est/loglik.txt").read_text()
    assert "loglik_health=" in loglik
    oe = (tmp_path / "est/occurrence_exposure.csv").read_text().splitlines()
    header_row = next(line for line in oe if line.startswith("cell_id"))
    assert header_row == ("cell_id,t_lo,t_hi,u_lo,u_hi,h,y_lo,y_hi,"
                          "hazard_type,occ,expo,rate,se")


def test_table2_layout(tmp_path):
    res = run_cli(["table2", "--n-list", "1,2", "--M", "40", *FAST, "--out", "o"],
                  tmp_path)
    assert res.returncode == 0, res.stderr
    lines = (tmp_path / "o/table2.csv").read_text().splitlines()
    header = next(line for line in lines if not line.startswith("#"))
    assert header == "n,mean_field,monte_carlo,mc_std_error,true"
    rows = [line for line in lines if not line.startswith(("#", "n,"))]
    assert rows[0].startswith("1,") and rows[0].count(",") == 4
    assert rows[0].split(",")[4] != ""   # true value only on the n=1 row
    assert rows[1].split(",")[4] == ""
    assert "std errors" in res.stdout    # n=1 MC vs one-individual gap is quantified


def test_table3_layout(tmp_path):
    res = run_cli(["table3", "--n-list", "2,3", "--reps", "4", "--M", "25",
                   "--T", "5", "--out", "o"], tmp_path)
    assert res.returncode == 0, res.stderr
    runs = (tmp_path / "o/table3_runs.csv").read_text().splitlines()
    assert "n,rep,estimate" in runs
    assert sum(1 for line in runs if line.startswith(("2,", "3,"))) == 8
    summary = (tmp_path / "o/table3_summary.csv").read_text().splitlines()
    assert "n,min,second_lowest,average,second_highest,max,std" in summary


def test_param_override_changes_scenario(tmp_path):
    outs = {}
    for tag, extra in (("a", []), ("b", ["--param", "zeta0=0.5"])):
        res = run_cli(["solve", "--model", "true-n1", *FAST, *extra, "--out", tag],
                      tmp_path)
        assert res.returncode == 0, res.stderr
        outs[tag] = (tmp_path / tag / "report_true_n1.txt").read_text()
    hash_a = next(l for l in outs["a"].splitlines() if "scenario=" in l)
    hash_b = next(l for l in outs["b"].splitlines() if "scenario=" in l)
    assert hash_a != hash_b


def test_usage_errors_exit_1(tmp_path):
    assert run_cli(["solve"], tmp_path).returncode == 1            # missing --model
    assert run_cli(["frobnicate"], tmp_path).returncode == 1       # unknown command
    res = run_cli(["solve", "--model", "meanfield", "--eta", "0.3", "--T", "5",
                   "--kh", "1", "--out", "o"], tmp_path)
    assert res.returncode == 1                                     # T/eta not integer
    res = run_cli(["solve", "--model", "meanfield", *FAST, "--param", "beta",
                   "--out", "o"], tmp_path)
    assert res.returncode == 1


def test_missing_files_exit_3(tmp_path):
    res = run_cli(["solve", "--model", "meanfield", *FAST,
                   "--scenario", "nope.toml", "--out", "o"], tmp_path)
    assert res.returncode == 3
    res = run_cli(["estimate", "--data", "nope.csv", "--out", "o"], tmp_path)
    assert res.returncode == 3


def test_threads_env_override(monkeypatch):
    import groupdis.cli as cli
    monkeypatch.setenv("GROUPDIS_THREADS", "3")
    parser = cli._build_parser()
    args = parser.parse_args(["simulate", "--n", "2", "--M", "4"])
    assert args.threads == 3
    args = parser.parse_args(["simulate", "--n", "2", "--M", "4", "--threads", "1"])
    assert args.threads == 1


def test_numerical_failure_exit_2(monkeypatch):
    def boom(args):
        raise NumericalError("NaN")
    monkeypatch.setitem(__import__("groupdis.cli", fromlist=["x"])._COMMANDS,
                        "solve", boom)
    assert main(["solve", "--model", "meanfield"]) == 2


def test_effective_epsilon_documented(tmp_path):
    scen = write_scenario(tmp_path / "s.toml",
                          'preset = "disability3"\nT = 5.0\n'
                          "payments = { b = 1.0, epsilon = 0.3 }\n")
    res = run_cli(["solve", "--model", "true-n1", "--eta", "0.25", "--kh", "2",
                   "--scenario", "s.toml", "--out", "o"], tmp_path)
    assert res.returncode == 0, res.stderr
    assert read_report(tmp_path / "o/report_true_n1.txt")["effective_epsilon"] == "0.25"
