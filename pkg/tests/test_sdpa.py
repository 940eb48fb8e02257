import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nflsos import sdpsolver
from nflsos.sdpa import SdpaFormatError, read_dats, read_solution, write_dats, write_solution
from nflsos.sdpsolver import SdpProblem, svec_len

from sdp_corpus import CORPUS, contradictory_equalities


@settings(max_examples=40)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_dats_text_roundtrip_is_exact(tmp_path_factory, sizes, m, seed):
    rng = np.random.default_rng(seed)
    nv = sum(svec_len(n) for n in sizes)
    A = sp.random(m, nv, density=0.5, random_state=rng, data_rvs=rng.standard_normal)
    prob = SdpProblem(sizes, 0, A, rng.standard_normal(m), rng.standard_normal(nv))
    path = tmp_path_factory.mktemp("sdpa") / "p.dat-s"
    write_dats(prob, path, title="random", comments=["seed " + str(seed)])
    back = read_dats(path)
    assert back.block_sizes == sizes
    assert np.array_equal(back.b, prob.b)
    assert np.abs((back.A - prob.A).toarray()).max(initial=0.0) <= 1e-12 * (1 + np.abs(prob.A.data).max(initial=0))
    assert np.allclose(back.c, prob.c, rtol=0, atol=1e-12)


@pytest.mark.parametrize("build", CORPUS, ids=lambda f: f.__name__)
def test_exported_problem_has_same_optimum(tmp_path, build):
    prob, opt = build()
    write_dats(prob, tmp_path / "p.dat-s")
    sol = sdpsolver.solve(read_dats(tmp_path / "p.dat-s"))
    assert sol.status == sdpsolver.OPTIMAL
    assert abs(sol.primal_objective - opt) <= 1e-6


@pytest.mark.parametrize("build", CORPUS, ids=lambda f: f.__name__)
def test_solution_file_roundtrip(tmp_path, build):
    prob, opt = build()
    sol = sdpsolver.solve(prob)
    write_solution(prob, sol, tmp_path / "p.out")
    back = read_solution(prob, tmp_path / "p.out")
    assert back.status == sol.status
    assert np.allclose(back.x, sol.x, atol=1e-12)
    assert np.allclose(back.y, sol.y, atol=1e-12)
    assert abs(back.primal_objective - opt) <= 1e-6
    assert sdpsolver.validate(prob, back).ok


def test_infeasible_phase_is_imported(tmp_path):
    prob = contradictory_equalities()
    sol = sdpsolver.solve(prob)
    write_solution(prob, sol, tmp_path / "p.out")
    assert read_solution(prob, tmp_path / "p.out").status == sdpsolver.PRIMAL_INFEASIBLE


def test_hand_written_sdpa_output(tmp_path):
    prob, _ = CORPUS[0]()
    (tmp_path / "p.out").write_text(
        "phase.value = pdOPT\nobjValPrimal = -1.0\nobjValDual = -1.0\niteration = 9\n"
        "xVec = \n{0.5,0.5}\nxMat = \n{\n{ {1.0,-1.0}, {-1.0,1.0} }\n}\n"
        "yMat = \n{\n{ {1.0,1.0}, {1.0,1.0} }\n}\n")
    sol = read_solution(prob, tmp_path / "p.out")
    assert sol.status == sdpsolver.OPTIMAL and sol.iterations == 9
    assert np.allclose(sol.blocks[0], np.ones((2, 2)))
    assert np.allclose(prob.A @ sol.x, prob.b)


def test_comments_are_written_and_skipped(tmp_path):
    prob, opt = CORPUS[1]()
    write_dats(prob, tmp_path / "p.dat-s", title="tri", comments=["nflsos 0.1.0 demo", "input sha256 abc"])
    text = (tmp_path / "p.dat-s").read_text()
    assert text.startswith('"tri"') and "* input sha256 abc" in text
    assert np.allclose(read_dats(tmp_path / "p.dat-s").c, prob.c)


@pytest.mark.parametrize("text", ["", "2\n1\n", "1\n1\n2\n1.0\n1 1 1 1\n"])
def test_malformed_dats(tmp_path, text):
    (tmp_path / "bad.dat-s").write_text(text)
    with pytest.raises(SdpaFormatError):
        read_dats(tmp_path / "bad.dat-s")


def test_malformed_solution(tmp_path):
    prob, _ = CORPUS[0]()
    (tmp_path / "a.out").write_text("objValPrimal = 1\n")
    with pytest.raises(SdpaFormatError):
        read_solution(prob, tmp_path / "a.out")
    (tmp_path / "b.out").write_text("phase.value = pdOPT\nyMat = \n{\n{ {1.0,1.0}, {1.0,1.0} }\n{ {1.0} }\n}\n")
    with pytest.raises(SdpaFormatError):
        read_solution(prob, tmp_path / "b.out")


def test_out_of_range_entry(tmp_path):
    (tmp_path / "bad.dat-s").write_text("1\n1\n2\n1.0\n1 1 3 1 1.0\n")
    with pytest.raises(SdpaFormatError, match="out of range"):
        read_dats(tmp_path / "bad.dat-s")
