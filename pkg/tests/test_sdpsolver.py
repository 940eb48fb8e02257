import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nflsos import sdpsolver
from nflsos.sdpsolver import (SdpProblem, SolverOptions, coef_to_sym, solve, svec_len, svec_to_sym, sym_to_coef,
                              sym_to_svec, validate)
from sdp_corpus import CORPUS, contradictory_equalities

cp = pytest.importorskip("cvxpy")


@pytest.mark.parametrize("build", CORPUS, ids=lambda f: f.__name__)
def test_analytic_corpus(build):
    problem, optimum = build()
    sol = solve(problem)
    assert sol.status == sdpsolver.OPTIMAL
    assert abs(sol.primal_objective - optimum) <= 1e-6
    assert validate(problem, sol).ok


def test_contradictory_rows_give_farkas_certificate():
    problem = contradictory_equalities()
    sol = solve(problem)
    assert sol.status == sdpsolver.PRIMAL_INFEASIBLE
    y = sol.certificate
    assert problem.b @ y > 0
    rep = validate(problem, sol)
    assert rep.ok, rep.problems


def test_zero_equals_one_without_blocks():
    problem = SdpProblem([], 0, sp.csr_matrix((1, 0)), np.array([1.0]), np.zeros(0))
    assert solve(problem).status == sdpsolver.PRIMAL_INFEASIBLE


def test_constant_problem_feasible():
    # one 1x1 block pinned by Q11 = 1
    problem = SdpProblem([1], 0, sp.csr_matrix([[1.0]]), np.array([1.0]), np.zeros(1))
    sol = solve(problem)
    assert sol.status == sdpsolver.OPTIMAL
    assert abs(sol.x[0] - 1.0) <= 1e-7


def test_validate_flags_perturbed_solution():
    problem, _ = CORPUS[1]()
    sol = solve(problem)
    sol.x = sol.x.copy()
    sol.x[0] += 0.1
    rep = validate(problem, sol)
    assert not rep.ok and any("primal residual" in p for p in rep.problems)


@pytest.mark.parametrize("build", CORPUS, ids=lambda f: f.__name__)
def test_weak_duality_in_debug_mode(build):
    problem, _ = build()
    solve(problem, SolverOptions(debug=True))  # asserts at every iteration


def test_iteration_trace_is_deterministic():
    problem, _ = CORPUS[4]()
    a, b = solve(problem), solve(problem)
    assert a.history == b.history
    assert np.array_equal(a.x, b.x)


@given(st.integers(1, 6), st.data())
def test_svec_roundtrips(n, data):
    v = np.array(data.draw(st.lists(st.floats(-10, 10), min_size=svec_len(n), max_size=svec_len(n))))
    X = svec_to_sym(v, n)
    assert np.array_equal(sym_to_svec(X), v)
    G = svec_to_sym(v[::-1].copy(), n)
    # <G, X> = sym_to_coef(G) . svec(X)
    assert np.isclose(np.vdot(G, X), sym_to_coef(G) @ v)
    assert np.allclose(coef_to_sym(sym_to_coef(G), n), G)


def _random_sdp(seed: int, sizes, m: int, n_free: int):
    """Strictly primal and dual feasible instance: b = A x0 with X0 > 0, c = A^T y0 - s0 with S0 > 0."""
    rng = np.random.default_rng(seed)
    nv = sum(svec_len(n) for n in sizes) + n_free
    A = rng.normal(size=(m, nv))
    X0 = []
    for n in sizes:
        R = rng.normal(size=(n, n))
        X0.append(R @ R.T + n * np.eye(n))
    x0 = np.concatenate([sym_to_svec(X) for X in X0] + [rng.normal(size=n_free)])
    y0 = rng.normal(size=m)
    s = [sym_to_coef(np.eye(n) + 0.1 * np.diag(rng.uniform(size=n))) for n in sizes]
    c = A.T @ y0 - np.concatenate(s + [np.zeros(n_free)])
    return SdpProblem(list(sizes), n_free, sp.csr_matrix(A), A @ x0, c)


def _clarabel(problem: SdpProblem) -> float:
    blocks = [cp.Variable((n, n), PSD=True) for n in problem.block_sizes]
    parts = []
    for X, n in zip(blocks, problem.block_sizes):
        iu = np.triu_indices(n)
        parts += [X[i, j] for i, j in zip(*iu)]
    u = cp.Variable(problem.n_free) if problem.n_free else None
    x = cp.hstack(parts + ([u[k] for k in range(problem.n_free)] if u is not None else []))
    A = problem.A.toarray()
    prob = cp.Problem(cp.Maximize(problem.c @ x), [A @ x == problem.b])
    prob.solve(solver=cp.CLARABEL)
    assert prob.status == cp.OPTIMAL
    return float(prob.value)


@settings(max_examples=12)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(1, 6),
       st.integers(0, 2))
def test_matches_clarabel_on_random_instances(seed, sizes, m, n_free):
    problem = _random_sdp(seed, sizes, m, n_free)
    sol = solve(problem)
    assert sol.status == sdpsolver.OPTIMAL
    ref = _clarabel(problem)
    assert abs(sol.primal_objective - ref) <= 1e-5 * (1 + abs(ref))
