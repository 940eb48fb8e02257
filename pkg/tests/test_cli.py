import json

import numpy as np
import pytest

from nflsos import __version__
from nflsos.cli import EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, main

DISK = '''name = "disk"
states = ["z1", "z2"]
inputs = ["u"]
[dynamics]
z1 = "-z1 + u"
z2 = "-z2"
[region]
polynomials = ["1 - z1^2 - z2^2"]
'''
GROWTH = 'name = "growth"\nstates = ["z"]\ninputs = ["u"]\n[dynamics]\nz = "z"\n'


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "disk.toml").write_text(DISK)
    (tmp_path / "growth.toml").write_text(GROWTH)
    return tmp_path


def test_certify_and_check(work, capsys):
    assert main(["certify", "disk.toml"]) == EXIT_OK
    doc = json.loads((work / "disk.cert.json").read_text())
    assert doc["version"] == __version__ and len(doc["inputs"]["definition"]) == 64
    assert main(["check-cert", "disk.cert.json", "disk.toml", "--n", "1000"]) == EXIT_OK
    assert main(["check-cert", "disk.cert.json", "disk.toml", "--n", "0"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


@pytest.mark.parametrize("deg", [2, 4])
def test_growth_is_infeasible(work, deg):
    assert main(["certify", "growth.toml", "--global", "--v-degree", str(deg)]) == EXIT_INFEASIBLE
    assert not (work / "growth.cert.json").exists()


@pytest.mark.parametrize("argv", [
    ["certify", "missing.toml"],
    ["certify", "disk.toml", "--v-degree"],
    ["certify", "disk.toml", "--bogus"],
    ["check-cert", "disk.toml", "disk.toml"],
])
def test_errors_exit_one(work, argv):
    assert main(argv) == EXIT_ERROR


def test_bad_variable_reports_position(work, capsys):
    (work / "bad.toml").write_text(GROWTH.replace('z = "z"', 'z = "-zz"'))
    assert main(["certify", "bad.toml", "--global"]) == EXIT_ERROR
    assert "unknown variable 'zz' at line 1, column 2" in capsys.readouterr().err


def test_check_cert_fails_on_edited_dynamics(work, capsys):
    assert main(["certify", "disk.toml"]) == EXIT_OK
    (work / "edited.toml").write_text(DISK.replace('z2 = "-z2"', 'z2 = "z2"'))
    assert main(["check-cert", "disk.cert.json", "edited.toml", "--n", "2000"]) == EXIT_ERROR
    assert "FAIL" in capsys.readouterr().out


def test_roa_matches_lambda_min(work):
    assert main(["certify", "disk.toml"]) == EXIT_OK
    V = json.loads((work / "disk.cert.json").read_text())["lyapunov"]["V"]
    assert main(["roa", "disk.cert.json", "disk.toml", "--k", "1"]) == EXIT_OK
    doc = json.loads((work / "disk.cert.json").read_text())
    coef = {tuple(map(tuple, m)): c for m, c in V}
    b = coef.get(((0, 1), (1, 1)), 0.0) / 2
    P = np.array([[coef.get(((0, 2),), 0.0), b], [b, coef.get(((1, 2),), 0.0)]])
    assert abs(doc["roa"]["gamma"] - np.linalg.eigvalsh(P)[0]) <= 1e-5
    lines = (work / "disk.levelset.csv").read_text().splitlines()
    assert lines[0].startswith(f"# nflsos {__version__}")
    assert main(["check-cert", "disk.cert.json", "disk.toml", "--n", "0"]) == EXIT_OK


def test_tampered_certificate_rejected(work, capsys):
    assert main(["certify", "disk.toml"]) == EXIT_OK
    doc = json.loads((work / "disk.cert.json").read_text())
    doc["lyapunov"]["V"][0][1] *= 2
    (work / "disk.cert.json").write_text(json.dumps(doc))
    assert main(["roa", "disk.cert.json", "disk.toml"]) == EXIT_ERROR
    assert main(["check-cert", "disk.cert.json", "disk.toml", "--n", "0"]) == EXIT_ERROR
    assert "hash" in capsys.readouterr().out + capsys.readouterr().err


def test_rerun_is_byte_identical(work):
    assert main(["certify", "disk.toml", "-o", "a.json"]) == EXIT_OK
    assert main(["certify", "disk.toml", "-o", "b.json"]) == EXIT_OK
    assert (work / "a.json").read_bytes() == (work / "b.json").read_bytes()


def test_dump_constraints(work, capsys):
    assert main(["dump-constraints", "disk.toml"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith(f"# nflsos {__version__} disk") and "input definition sha256" in out
    assert main(["certify", "disk.toml", "--dump-constraints"]) == EXIT_OK
    assert (work / "disk.constraints.txt").exists()


def test_sdpa_export_and_import(work, capsys):
    from nflsos import sdpsolver
    from nflsos.sdpa import read_dats, write_solution
    assert main(["certify", "disk.toml", "--solver", "sdpa-export", "--sdpa-out", "disk.dat-s"]) == EXIT_OK
    assert "exported only" in capsys.readouterr().out
    assert not (work / "disk.cert.json").exists()
    text = (work / "disk.dat-s").read_text()
    assert f"* nflsos {__version__} disk" in text
    prob = read_dats(work / "disk.dat-s")
    write_solution(prob, sdpsolver.solve(prob), work / "disk.out")
    assert main(["certify", "disk.toml", "--solver", "sdpa-export", "--sdpa-out", "disk.dat-s",
                 "--sdpa-solution", "disk.out"]) == EXIT_OK
    assert main(["check-cert", "disk.cert.json", "disk.toml", "--n", "500"]) == EXIT_OK


def test_simulate_writes_csv(work):
    assert main(["simulate", "disk.toml", "--x0", "0.5,-0.5", "--horizon", "5", "-o", "t.csv"]) == EXIT_OK
    rows = [r for r in (work / "t.csv").read_text().splitlines() if not r.startswith("#")]
    last = [float(v) for v in rows[-1].split(",")]
    assert abs(last[-1]) < 0.5 * np.exp(-4.5) and abs(last[-2]) < 0.5 * np.exp(-4.5)
    assert main(["simulate", "disk.toml", "--grid", "4", "-o", "g.csv"]) == EXIT_ERROR  # no box to grid
    (work / "sq.toml").write_text(DISK.replace('polynomials = ["1 - z1^2 - z2^2"]', 'lower = [-1, -1]\nupper = [1, 1]'))
    assert main(["simulate", "sq.toml", "--grid", "4", "--horizon", "2", "-o", "g.csv"]) == EXIT_OK
    rows = [r for r in (work / "g.csv").read_text().splitlines() if not r.startswith("#")]
    assert len(rows) == 1 + 16
    assert main(["simulate", "disk.toml", "--x0", "1", "-o", "x.csv"]) == EXIT_ERROR


def test_roa_on_networked_benchmark(work, bench):
    # certificates list the network node variables; V only uses the states
    assert main(["certify", str(bench / "three_state.toml"), "-o", "ts.json"]) == EXIT_OK
    assert main(["roa", "ts.json", str(bench / "three_state.toml")]) == EXIT_OK
    assert json.loads((work / "ts.json").read_text())["roa"]["gamma"] > 0
