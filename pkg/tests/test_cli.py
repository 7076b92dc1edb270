"""Command-line driver: subcommand wiring, exit codes, artifacts."""

import csv
import os
import subprocess
import sys

import pytest

from pisoflow.cli import _apply_thread_env, cli_dispatch

CAVITY = """\
[case]
name = cli-cavity
mesh = cavity

[mesh]
shape = 8 8

[fluid]
nu = 0.01

[time]
dt = 0.1
steps = 4

[solver]
tol = 1e-10
"""

SCALE_OPT = """\
[case]
mesh = box

[mesh]
shape = 10 8

[fluid]
nu = 0.002

[time]
dt = 0.5
steps = 1

[solver]
tol = 1e-10

[initial]
kind = gauss
amplitude = 2.0

[optimization]
target = scale
lr = {lr}
iterations = {iterations}
init = 0.6
reference = 1.0
"""

CHANNEL = """\
[case]
name = cli-channel
mesh = channel
forcing = wall_shear

[mesh]
shape = 6 6 4

[fluid]
nu = 0.004

[time]
dt = 0.05
steps = 4

[solver]
tol = 1e-8

[initial]
kind = reichardt
re_tau = 80
perturbation = 0.05
"""


def _cfg(tmp_path, text, name="case.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_simulate_end_to_end(tmp_path, capsys):
    cfg = _cfg(tmp_path, CAVITY)
    out = str(tmp_path / "out")
    rc = cli_dispatch(["simulate", "--config", cfg, "--out", out,
                       "--dump-every", "2"])
    assert rc == 0
    files = sorted(os.listdir(out))
    assert "u_final.dump" in files and "p_final.dump" in files
    assert "u_000002.dump" in files and "u_000004.dump" in files
    summary = capsys.readouterr().out
    assert "steps=4" in summary and "cli-cavity" in summary


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli_dispatch(["simulate"]) == 2                      # missing args
    assert cli_dispatch(["no-such-command"]) == 2
    assert cli_dispatch(["simulate", "--config", str(tmp_path / "no.cfg"),
                         "--out", str(tmp_path)]) == 2          # missing file
    bad = _cfg(tmp_path, CAVITY + "\n[fluid2]\n", "bad.cfg")
    assert cli_dispatch(["simulate", "--config", bad,
                         "--out", str(tmp_path)]) == 2
    assert "unknown section" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, capsys):
    cfg = _cfg(tmp_path, CAVITY.replace("nu = 0.01", "nu = -5.0"))
    rc = cli_dispatch(["simulate", "--config", cfg,
                       "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "numerical failure" in capsys.readouterr().err


def test_optimize_with_trace(tmp_path, capsys):
    cfg = _cfg(tmp_path, SCALE_OPT.format(lr=0.01, iterations=20))
    trace = str(tmp_path / "trace.csv")
    rc = cli_dispatch(["optimize", "--config", cfg, "--trace", trace])
    assert rc == 0
    assert "diverged=False" in capsys.readouterr().out
    with open(trace) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "loss", "param", "grad_norm", "seconds"]
    assert len(rows) == 21
    assert float(rows[-1][1]) < float(rows[1][1])  # loss decreased


def test_optimize_requires_section(tmp_path, capsys):
    cfg = _cfg(tmp_path, CAVITY)
    assert cli_dispatch(["optimize", "--config", cfg]) == 2
    assert "no [optimization] section" in capsys.readouterr().err


def test_optimize_divergence_exits_1(tmp_path, capsys):
    cfg = _cfg(tmp_path, SCALE_OPT.format(lr=80.0, iterations=10))
    rc = cli_dispatch(["optimize", "--config", cfg])
    assert rc == 1
    assert "diverged=True" in capsys.readouterr().out


def test_ablate_csv(tmp_path, capsys):
    out = str(tmp_path / "abl.csv")
    rc = cli_dispatch(["ablate", "--paths", "full,adv,none", "--n", "1",
                       "--iterations", "4", "--out", out])
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["path", "n", "lr"]
    assert {r[0] for r in rows[1:]} == {"full", "adv_only", "none"}
    assert len(rows) == 4
    printed = capsys.readouterr().out
    assert "path=full" in printed and "median_iter_s=" in printed


def test_ablate_rejects_bad_path(capsys):
    assert cli_dispatch(["ablate", "--paths", "warp", "--n", "1"]) == 2
    assert "bad --paths" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    rc = cli_dispatch(["gradcheck", "--seed", "1"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "all stages passed" in out
    assert "pass=1" in out and "pass=0" not in out


def test_gradcheck_rejects_single_precision(capsys):
    assert cli_dispatch(["gradcheck", "--precision", "single"]) == 2
    assert "double precision only" in capsys.readouterr().err


def test_stats_pipeline(tmp_path, capsys):
    cfg = _cfg(tmp_path, CHANNEL)
    out = str(tmp_path / "dumps")
    assert cli_dispatch(["simulate", "--config", cfg, "--out", out,
                         "--dump-every", "2"]) == 0
    prof = str(tmp_path / "profile.csv")
    rc = cli_dispatch(["stats", "--config", cfg, "--dumps",
                       os.path.join(out, "u_0*.dump"), "--out", prof])
    assert rc == 0
    assert "2 frames" in capsys.readouterr().out
    with open(prof) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "y"
    assert "mean_u" in rows[0] and "cov_uv" in rows[0]
    assert len(rows) == 7  # 6 wall-normal slices + header


def test_stats_no_matching_dumps(tmp_path, capsys):
    cfg = _cfg(tmp_path, CHANNEL)
    rc = cli_dispatch(["stats", "--config", cfg, "--dumps",
                       str(tmp_path / "none*.dump"), "--out",
                       str(tmp_path / "p.csv")])
    assert rc == 2
    assert "no dumps match" in capsys.readouterr().err


def test_thread_env_applied(monkeypatch):
    monkeypatch.setenv("PISOFLOW_THREADS", "3")
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    monkeypatch.delenv("OPENBLAS_NUM_THREADS", raising=False)
    _apply_thread_env()
    assert os.environ["OMP_NUM_THREADS"] == "3"
    assert os.environ["OPENBLAS_NUM_THREADS"] == "3"
    # explicit settings win over the convenience variable
    monkeypatch.setenv("OMP_NUM_THREADS", "7")
    _apply_thread_env()
    assert os.environ["OMP_NUM_THREADS"] == "7"


def test_console_entry_point():
    rc = subprocess.run([sys.executable, "-c",
                         "from pisoflow.cli import main; main()",
                         "gradcheck", "--precision", "single"],
                        capture_output=True, text=True)
    assert rc.returncode == 2
    assert "double precision" in rc.stderr
