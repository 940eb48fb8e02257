import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nflsos.certifier import (FEASIBLE, INFEASIBLE, StabilityResult, certify_global, certify_local,
                              level_set_contains, roa_maximize, certify_shrinking, sample_region)
from nflsos.polyalg import Polynomial
from nflsos.system import Box, definition_from_dict


def toy(dynamics, states=("z",), region=None, **extra):
    raw = {"states": list(states), "inputs": ["u"], "dynamics": dynamics, **extra}
    if region is not None:
        raw["region"] = region
    return definition_from_dict(raw, name="toy")


def quad(spec, P):
    z = [spec.space.var(s) for s in spec.states]
    return sum((float(P[i, j]) * z[i] * z[j] for i in range(len(z)) for j in range(len(z))), spec.space.zero())


def test_linear_decay_gives_quadratic_v():
    spec = toy({"z": "-z"}, degrees={"v": 2})
    res = certify_global(spec)
    assert res.status == FEASIBLE
    z = spec.space.var("z")
    c = res.V.terms[((spec.space.index("z"), 2),)]
    assert res.V.almost_equal(c * z * z, 1e-9)
    assert c >= spec.options.epsilon - 1e-9
    assert res.soundness.ok


@pytest.mark.parametrize("deg", [2, 4])
def test_unstable_linear_is_infeasible(deg):
    res = certify_global(toy({"z": "z"}, degrees={"v": deg}))
    assert res.status == INFEASIBLE
    assert res.V is None


def test_region_must_contain_origin():
    spec = toy({"z": "-z"}, region={"lower": [0.5], "upper": [1.0]})
    with pytest.raises(ValueError, match="origin"):
        certify_local(spec)


CUBIC = {"z": "-z + z^3"}  # stable exactly on |z| < 1
# z^2 (2 - eps - 2 z^2) against linear box faces needs quartic multipliers
CUBIC_DEGREES = {"v": 2, "s": 4, "t": 4, "p": 4}


def test_shrinking_shrinks_into_the_basin():
    spec = toy(CUBIC, region={"lower": [-2.0], "upper": [2.0]}, options={"shrink_factor": 0.5},
               degrees=CUBIC_DEGREES)
    res = certify_shrinking(spec)
    assert res.status == FEASIBLE
    regions = [h["region"] for h in res.iterations_log]
    assert res.shrink_iterations == len(regions) - 1 >= 1
    assert all(h["status"] == INFEASIBLE for h in res.iterations_log[:-1])
    for outer, inner in zip(regions, regions[1:]):
        assert outer[0][0] < inner[0][0] < 0 < inner[0][1] < outer[0][1]
    assert res.final_region.upper[0] < 1.0


def test_shrinking_without_shrinking_stops_at_once():
    spec = toy(CUBIC, region={"lower": [-2.0], "upper": [2.0]}, options={"max_shrink": 0},
               degrees=CUBIC_DEGREES)
    res = certify_shrinking(spec)
    assert res.status == INFEASIBLE
    assert res.shrink_iterations == 0 and len(res.iterations_log) == 1


def test_unit_disk_roa():
    spec = toy({"z1": "-z1 + u", "z2": "-z2"}, states=("z1", "z2"), region={"polynomials": ["1 - z1^2 - z2^2"]})
    base = StabilityResult(FEASIBLE, "local", V=quad(spec, np.eye(2)))
    out = roa_maximize(base, spec, k=1)
    assert abs(out.gamma - 1.0) <= 1e-6
    scaled = roa_maximize(StabilityResult(FEASIBLE, "local", V=quad(spec, 10 * np.eye(2))), spec, k=1)
    assert abs(scaled.gamma - 10.0) <= 1e-5


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_box_roa_matches_s_lemma(seed):
    rng = np.random.default_rng(seed)
    L = rng.uniform(-1, 1, size=(2, 2)) + 1.5 * np.eye(2)
    P = L @ L.T
    lo, hi = -rng.uniform(0.3, 2.0, 2), rng.uniform(0.3, 2.0, 2)
    spec = toy({"z1": "-z1", "z2": "-z2"}, states=("z1", "z2"),
               region={"lower": lo.tolist(), "upper": hi.tolist()})
    Pinv = np.linalg.inv(P)
    # min of z'Pz on the hyperplane a.z = b is b^2 / (a' P^-1 a)
    expect = min(min(hi[i], -lo[i]) ** 2 / Pinv[i, i] for i in range(2))
    out = roa_maximize(StabilityResult(FEASIBLE, "local", V=quad(spec, P), final_region=spec.region), spec, k=1)
    assert out.gamma == pytest.approx(expect, rel=1e-5, abs=1e-7)


def test_level_set_lies_in_region():
    spec = toy({"z1": "-z1", "z2": "-z2"}, states=("z1", "z2"), region={"lower": [-1, -2], "upper": [2, 1]})
    V = quad(spec, np.array([[2.0, 0.5], [0.5, 1.0]]))
    out = roa_maximize(StabilityResult(FEASIBLE, "local", V=V, final_region=spec.region), spec, k=1)
    pts = np.random.default_rng(1).uniform(-4, 4, size=(20000, 2))
    inside = pts[level_set_contains(V, out.gamma, ["z1", "z2"], pts)]
    assert len(inside) > 0
    assert spec.region.contains(inside).all()


ROBUST = {"z": "-delta*z + 0.1*z^3"}


@pytest.mark.parametrize("degrees", [{}, CUBIC_DEGREES], ids=["low", "quartic"])
def test_narrow_interval_agrees_with_nominal(degrees):
    reg = {"lower": [-1.0], "upper": [1.0]}
    narrow = toy(ROBUST, region=reg, robustness={"param": "delta", "interval": [1.999, 2.001], "nominal": 2.0},
                 degrees=degrees)
    nominal = toy({"z": "-2*z + 0.1*z^3"}, region=reg, degrees=degrees)
    assert certify_local(narrow).status == certify_local(nominal).status


def test_robust_interval_feasible():
    spec = toy(ROBUST, region={"lower": [-1.0], "upper": [1.0]},
               robustness={"param": "delta", "interval": [1.0, 3.0], "nominal": 2.0}, degrees=CUBIC_DEGREES)
    res = certify_local(spec)
    assert res.status == FEASIBLE and res.kind == "robust"
    assert res.soundness.ok


def test_robust_interval_with_unstable_member_is_infeasible():
    spec = toy(ROBUST, region={"lower": [-1.0], "upper": [1.0]},
               robustness={"param": "delta", "interval": [-1.0, 1.0], "nominal": 0.5}, degrees=CUBIC_DEGREES)
    assert certify_local(spec).status == INFEASIBLE


def test_sample_region_respects_polynomials():
    spec = toy({"z1": "-z1", "z2": "-z2"}, states=("z1", "z2"), region={"polynomials": ["1 - z1^2 - z2^2"]})
    pts = sample_region(spec, None, 500, np.random.default_rng(0))
    assert pts.shape == (500, 2) and (np.sum(pts ** 2, axis=1) <= 1).all()
