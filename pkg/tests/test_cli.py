import argparse
import json

import numpy as np
import pytest

from bfngn import cli
from bfngn.numerics import weighted_adjoint

# sweep defaults (gains 0:5:0.1, seed 7), frozen at first run: (kappa, err)
SWEEP_SEED7 = {0.0: 1.24496737, 1.0: 0.164177877, 3.0: 0.184654813, 5.0: 0.183435657}


def write_ini(path, section, **values):
    body = f"[{section}]\n" + "".join(f"{k} = {v}\n" for k, v in values.items())
    path.write_text(body)
    return str(path)


def read_rows(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


# ---- verify ----

def test_verify_passes(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert cli.main(["verify", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["passed"] and len(report["checks"]) == 6
    assert "lemma4" in capsys.readouterr().out


def test_verify_names_injected_adjoint_fault(capsys):
    args = argparse.Namespace(config=None, seed=None, out=None, only=None)

    def broken(Op, G_in=None, G_out=None):
        return -weighted_adjoint(Op, G_in, G_out)

    assert cli.cmd_verify(args, adjoint_fn=broken) == 1
    captured = capsys.readouterr()
    assert "failed checks: adjoint" in captured.err
    report = json.loads(captured.out[captured.out.index("{"):])
    failing = [c["name"] for c in report["checks"] if not c["passed"]]
    assert failing == ["adjoint"]


def test_verify_single_suite(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert cli.main(["verify", "--only", "lemma4", "--out", str(out)]) == 0
    checks = json.loads(out.read_text())["checks"]
    assert [c["name"] for c in checks] == ["lemma4"]
    assert checks[0]["cases"] >= 200


def test_verify_rejects_unknown_suite():
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "--only", "lemma9"])
    assert exc.value.code == 2


# ---- sweep ----

def test_sweep_one_gain_one_seed(tmp_path):
    cfg = write_ini(tmp_path / "s.ini", "sweep", gains="1.0")
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    header, rows = read_rows(out)
    assert header == ["kappa", "err", "seed"]
    assert len(rows) == 1 and rows[0][0] == "1.00000000e+00" and rows[0][2] == "3"
    meta = json.loads((tmp_path / "sweep.csv.json").read_text())
    assert meta["seeds"] == [3] and len(meta["config_sha256"]) == 64


def test_sweep_rejects_negative_gain(tmp_path, capsys):
    cfg = write_ini(tmp_path / "s.ini", "sweep", gains="-1,2")
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "x.csv")])
    assert exc.value.code == 2
    assert "nonnegative" in capsys.readouterr().err


def test_unknown_config_key_is_a_usage_error(tmp_path):
    cfg = write_ini(tmp_path / "s.ini", "sweep", gain="1")
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--config", cfg])
    assert exc.value.code == 2


def test_sweep_default_curve_regression(tmp_path):
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "--out", str(out)]) == 0
    _, rows = read_rows(out)
    table = {round(float(r[0]), 10): float(r[1]) for r in rows}
    assert len(rows) == 51 and all(r[2] == "7" for r in rows)
    errs = np.array([table[k] for k in sorted(table)])
    # large drop at small gains, then nearly flat
    assert errs[10] < errs[0]
    assert abs(errs[30] - errs[50]) < 0.25 * abs(errs[0] - errs[30])
    for kappa, frozen in SWEEP_SEED7.items():
        assert table[kappa] == pytest.approx(frozen, rel=1e-9)


def test_sweep_threads_do_not_change_output(tmp_path, monkeypatch):
    cfg = write_ini(tmp_path / "s.ini", "sweep", gains="0,1", seeds="1,2,3")
    serial, threaded = tmp_path / "a.csv", tmp_path / "b.csv"
    monkeypatch.setenv("BFN_THREADS", "1")
    cli.main(["sweep", "--config", cfg, "--out", str(serial)])
    monkeypatch.setenv("BFN_THREADS", "3")
    cli.main(["sweep", "--config", cfg, "--out", str(threaded)])
    assert serial.read_bytes() == threaded.read_bytes()
    monkeypatch.setenv("BFN_THREADS", "many")
    with pytest.raises(SystemExit):
        cli.main(["sweep", "--config", cfg, "--out", str(threaded)])


# ---- wave ----

def coarse_wave_ini(path, **extra):
    return write_ini(path, "wave", h="0.05", t_final="2", dt="2e-3", **extra)


def test_wave_rows_and_replay(tmp_path):
    cfg = coarse_wave_ini(tmp_path / "w.ini", n_iters="4")
    first, second = tmp_path / "w1.csv", tmp_path / "w2.csv"
    assert cli.main(["wave", "--config", cfg, "--out", str(first)]) == 0
    header, rows = read_rows(first)
    assert header == ["iteration", "param_err", "displ_err", "vel_err"]
    assert [r[0] for r in rows] == ["1", "2", "3", "4"]
    theta_rows = (tmp_path / "w1.csv.theta.csv").read_text().splitlines()
    assert len(theta_rows) == 5 and theta_rows[0].startswith("iteration,theta_0,")
    # replaying the recorded configuration reproduces the table byte for byte
    meta = json.loads((tmp_path / "w1.csv.json").read_text())
    replay = write_ini(tmp_path / "replay.ini", "wave", **meta["config"])
    assert cli.main(["wave", "--config", replay, "--out", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()
    assert json.loads((tmp_path / "w2.csv.json").read_text())["config_sha256"] == meta["config_sha256"]


def test_wave_truth_start(tmp_path):
    cfg = coarse_wave_ini(tmp_path / "w.ini", n_iters="1", noise="false", init="truth",
                          prior="truth")
    out = tmp_path / "w.csv"
    assert cli.main(["wave", "--config", cfg, "--out", str(out)]) == 0
    _, rows = read_rows(out)
    assert all(float(v) < 1e-6 for v in rows[0][1:])


@pytest.mark.parametrize("key,value", [("n_iters", "0"), ("kappa", "-1"), ("schedule", "cubic"),
                                       ("init", "middle"), ("noise", "perhaps")])
def test_wave_usage_errors(tmp_path, key, value):
    cfg = coarse_wave_ini(tmp_path / "w.ini", **{key: value})
    with pytest.raises(SystemExit) as exc:
        cli.main(["wave", "--config", cfg, "--out", str(tmp_path / "w.csv")])
    assert exc.value.code == 2


def test_estimation_failure_exit_code(tmp_path, capsys):
    cfg = write_ini(tmp_path / "w.ini", "wave", h="0.05", t_final="0.5", dt="2e-3", n_iters="4")
    assert cli.main(["wave", "--config", cfg, "--out", str(tmp_path / "w.csv")]) == 3
    assert "warmup" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    cfg = coarse_wave_ini(tmp_path / "w.ini", n_iters="1")
    with pytest.raises(SystemExit):
        cli.main(["wave", "--config", cfg, "--out", str(tmp_path / "missing" / "w.csv")])


# ---- linear demo ----

def test_linear_demo(tmp_path):
    cfg = write_ini(tmp_path / "l.ini", "linear-demo", max_iters="40", t_final="10", n_steps="1000")
    out = tmp_path / "lin.csv"
    assert cli.main(["linear-demo", "--config", cfg, "--out", str(out)]) == 0
    header, rows = read_rows(out)
    assert header == ["iteration", "kappa", "cost", "err_zeta", "err_theta"]
    errs = [float(r[3]) for r in rows]
    assert errs[-1] < 1e-6 * errs[0]


# ---- parsing helpers ----

def test_parsers():
    assert cli.parse_float_list("0:0.3:0.1") == [0.0, 0.1, 0.2, 0.3]
    assert cli.parse_float_list("1, 2.5") == [1.0, 2.5]
    assert cli.parse_int_list("0..3") == [0, 1, 2, 3]
    assert cli.parse_int_list("4,9") == [4, 9]
    assert cli.parse_bool("Yes") and not cli.parse_bool("off")
    for bad in (lambda: cli.parse_float_list("1:2:0"), lambda: cli.parse_float_list("a"),
                lambda: cli.parse_int_list("1..x"), lambda: cli.parse_bool("2")):
        with pytest.raises(cli.UsageError):
            bad()
