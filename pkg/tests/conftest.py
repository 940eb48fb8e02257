from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nflsos.polyalg import Polynomial, VariableSpace

ROOT = Path(__file__).resolve().parent.parent
BENCH = ROOT / "benchmarks"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs a full benchmark certification (minutes)")


@pytest.fixture
def bench():
    return BENCH


@pytest.fixture
def xy():
    sp = VariableSpace(["x", "y"])
    return sp, sp.var("x"), sp.var("y")


def random_square_sum(space: VariableSpace, rng: np.random.Generator, n_vars: int, half_deg: int,
                      n_squares: int) -> Polynomial:
    """Sum of squares of random dense polynomials, the generate-then-verify oracle."""
    from nflsos.polyalg import monomials_up_to
    basis = monomials_up_to(list(range(n_vars)), half_deg)
    p = space.zero()
    for _ in range(n_squares):
        q = Polynomial(space, {m: float(c) for m, c in zip(basis, rng.normal(size=len(basis)))})
        p = p + q * q
    return p


# acceptance criterion -> (verdict, title, detail), filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {verdict}: {title}" + (f" ({detail})" if detail else ""))
