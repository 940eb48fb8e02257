"""Lyapunov certification pipeline for neural feedback loops.

``certify_global`` and ``certify_local`` build one SOS program each: V - rho
is SOS by construction of V, and the negated Lyapunov derivative minus
multiplier-weighted constraints must be SOS in all loop variables.
``certify_shrinking`` shrinks the region until the local program is feasible
and ``roa_maximize`` finds the largest certified sublevel set of V.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import abstraction as ab
from .nnmodel import Box, ibp
from .polyalg import CompiledPolynomial, Polynomial, mono_degree, monomials_up_to, substitute_many
from .simulator import SampleReport, sample_certificate
from .sosbuilder import Certificate, DecisionPoly, SosProgram, UncoverableMonomial, gram_basis_for
from .system import ClosedLoop, ProblemSpec, region_faces

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
UNSOUND = "unsound"

GLOBAL_SAMPLE_HALF_WIDTH = 3.0


@dataclass
class StabilityResult:
    status: str
    kind: str
    certificate: Certificate | None = None
    V: Polynomial | None = None
    final_region: Box | None = None
    shrink_iterations: int = 0
    gamma: float | None = None
    roa_certificate: Certificate | None = None
    abstraction: ab.SemialgebraicSet | None = None
    soundness: SampleReport | None = None
    solver_status: str = ""
    message: str = ""
    sizes: dict = field(default_factory=dict)
    iterations_log: list = field(default_factory=list)
    multipliers: list = field(default_factory=list)
    dynamics: list = field(default_factory=list)
    roa_k: int | None = None

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


@dataclass
class Abstraction:
    """Everything the Lyapunov program needs besides V: the constraint set,
    the substituted polynomial dynamics and the variable bookkeeping."""

    S: ab.SemialgebraicSet
    f: list
    anchor: bool
    anchor_vars: set
    mult_vars: list
    region: Box | None
    encoding: ab.NetworkEncoding | None


def _origin_is_fixed(spec: ProblemSpec) -> bool:
    nn = spec.network
    if nn is None:
        return True
    tr = nn.trace_batch(np.zeros((1, nn.n_in)))
    vals = [np.abs(a).max(initial=0.0) for a in tr.pre + tr.post + [tr.output]]
    return max(vals, default=0.0) <= 1e-12


def build_abstraction(spec: ProblemSpec, region: Box | None) -> Abstraction:
    """Constraint set for the global program (``region`` None) or the local one."""
    space = spec.space
    opts = spec.options
    nn = spec.network
    S = ab.SemialgebraicSet(space)
    enc = bounds = None
    if nn is not None:
        enc = ab.encode_network(nn, space, spec.states, keep_preactivations=opts.keep_preactivations)
        bounds = ibp(nn, region) if region is not None else None
        if nn.activation == "relu":
            S.extend(ab.relu_constraints(enc, bounds))
        else:
            S.extend(ab.tanh_sector_constraints(enc, bounds))
        S.extend(ab.slope_constraints(enc, opts.slope))
        pi = enc.output
    else:
        pi = [space.zero() for _ in spec.inputs]
    subs = {}
    for j, u in enumerate(spec.inputs):
        ibp_u = (float(bounds.out_lower[j]), float(bounds.out_upper[j])) if bounds is not None else None
        inactive = ibp_u is not None and max(abs(ibp_u[0]), abs(ibp_u[1])) <= (spec.u_max or 0.0)
        if spec.u_max is not None and not inactive:
            S.extend(ab.saturation_constraints(space, u, pi[j], spec.u_max, ibp_u))
        else:
            # no saturation, or IBP proves it never engages: sat(u) = u exactly
            subs[u] = pi[j]
            if spec.u_max is not None:
                S.notes.append(f"saturation on {u} inactive over the region; input replaced by the network output")
    for r in spec.recast:
        if region is None:
            raise ValueError(f"recast variable {r.var} needs region bounds on {r.driver}; use a local analysis")
        i = spec.states.index(r.driver)
        alpha = r.alpha(float(region.lower[i]), float(region.upper[i]))
        S.ineq(ab.recast_sector_constraint(space, r.var, r.driver, alpha), "recast-sector",
               f"{r.var} alpha={alpha!r}")
    if spec.robustness is not None:
        rb = spec.robustness
        S.ineq(ab.robustness_constraints(space, rb.param, rb.lower, rb.upper), "robustness",
               f"{rb.param} in [{rb.lower:g}, {rb.upper:g}]")
    if region is not None or spec.region_polys:
        for d in region_faces(spec, region):
            S.reg(d)
    f = [substitute_many(fi, subs) if subs else fi for fi in spec.dynamics]

    anchor = _origin_is_fixed(spec)
    params = {space.index(p) for p in spec.params}
    all_vars = set()
    for p in f:
        all_vars |= p.variables()
    all_vars |= S.variables()
    all_vars |= {space.index(s) for s in spec.states}
    anchor_vars = all_vars - params
    if opts.mult_vars == "all":
        mult = sorted(all_vars)
    else:
        mult = sorted({space.index(n) for n in spec.states + spec.recast_vars} | params)
    return Abstraction(S, f, anchor, anchor_vars, mult, region, enc)


def _anchor_degree(m, anchor_vars) -> int:
    return sum(e for i, e in m if i in anchor_vars)


def _needs_anchor(g: Polynomial, anchor_vars) -> bool:
    """True when g has a nonzero part of anchor-degree 0 or 1 (constant or linear in the loop variables)."""
    return any(_anchor_degree(m, anchor_vars) <= 1 for m in g.terms)


def multiplier_basis(A: Abstraction, g: Polynomial, max_deg: int, min_deg: int = 0) -> list:
    """Monomials in the multiplier variables. When the equilibrium sits at the
    origin, a multiplier on a constraint with constant or linear part must
    vanish there to second order, so anchor-degree-0 monomials are dropped."""
    basis = monomials_up_to(A.mult_vars, max_deg, min_deg)
    if A.anchor and _needs_anchor(g, A.anchor_vars):
        basis = [m for m in basis if _anchor_degree(m, A.anchor_vars) >= 1]
    return basis


@dataclass
class LyapunovProgram:
    prog: SosProgram
    A: Abstraction
    V: DecisionPoly
    rho: Polynomial
    expression: DecisionPoly
    multipliers: list  # (name, kind, index into constraint pool)


def build_lyapunov_program(spec: ProblemSpec, region: Box | None) -> LyapunovProgram:
    A = build_abstraction(spec, region)
    space = spec.space
    deg = spec.degrees
    opts = spec.options
    prog = SosProgram(space, spec.name)
    zidx = [space.index(s) for s in spec.states]
    zs = [space.var(s) for s in spec.states]
    r2 = sum((z * z for z in zs), space.zero())
    rho = opts.epsilon * r2
    Vg = prog.sos_poly("V", monomials_up_to(zidx, deg.v // 2, 1))
    V = Vg + rho
    E = -opts.margin * DecisionPoly.from_poly(r2)
    for s, fi in zip(spec.states, A.f):
        E._iadd(V.diff(s) * fi, -1.0)
    mults = []
    for i, c in enumerate(A.S.inequalities):
        basis = multiplier_basis(A, c.poly, deg.s_deg // 2)
        if not basis:
            continue
        s_i = prog.sos_poly(f"s{i}", basis)
        E._iadd(s_i * c.poly, -1.0)
        mults.append((f"s{i}", "ineq", i))
    for j, c in enumerate(A.S.equalities):
        basis = multiplier_basis(A, c.poly, deg.t_deg)
        if not basis:
            continue
        t_j = prog.free_poly(f"t{j}", basis)
        E._iadd(t_j * c.poly, -1.0)
        mults.append((f"t{j}", "eq", j))
    for k, c in enumerate(A.S.region):
        basis = multiplier_basis(A, c.poly, deg.p_deg // 2)
        if not basis:
            continue
        p_k = prog.sos_poly(f"p{k}", basis)
        E._iadd(p_k * c.poly, -1.0)
        mults.append((f"p{k}", "region", k))
    support = E.support()
    basis = gram_basis_for(support)
    if A.anchor:
        basis = [m for m in basis if _anchor_degree(m, A.anchor_vars) >= 1]
    prog.add_sos(E, "lyapunov", basis=basis)
    return LyapunovProgram(prog, A, V, rho, E, mults)


def _check_region(region: Box):
    if not region.contains_origin_strictly():
        raise ValueError("region must contain the origin in its interior")


def _solve(spec: ProblemSpec, region: Box | None, kind: str, backend=None) -> StabilityResult:
    """Build, lower and solve one Lyapunov program. ``backend`` maps the lowered
    SdpProblem to a ConicSolution; the embedded solver is the default."""
    t0 = time.perf_counter()
    try:
        lp = build_lyapunov_program(spec, region)
    except UncoverableMonomial as exc:
        return StabilityResult(INFEASIBLE, kind, final_region=region, message=str(exc), solver_status="uncoverable")
    low = lp.prog.lower()
    sizes = {"rows": low.sdp.n_rows, "blocks": len(low.sdp.block_sizes),
             "max_block": max(low.sdp.block_sizes, default=0), "free": low.sdp.n_free,
             "constraints": {"ineq": len(lp.A.S.inequalities), "eq": len(lp.A.S.equalities),
                             "region": len(lp.A.S.region)}}
    log.info("%s: %d rows, %d PSD blocks (largest %d), %d free", kind, sizes["rows"], sizes["blocks"],
             sizes["max_block"], sizes["free"])
    if backend is None:
        from .sdpsolver import solve as sdp_solve
        sol = sdp_solve(low.sdp, spec.options.solver)
    else:
        sol = backend(low.sdp)
    res = low.result(sol, spec.options.psd_tol, spec.options.recon_tol)
    sizes["seconds"] = round(time.perf_counter() - t0, 3)
    out = StabilityResult(INFEASIBLE, kind, final_region=region, abstraction=lp.A.S, solver_status=res.status,
                          message=res.message, sizes=sizes, multipliers=lp.multipliers,
                          dynamics=list(lp.A.f))
    if not res.feasible:
        return out
    cert = res.certificate
    V = lp.V.value(low.ids_vector(sol.x))
    out.certificate = cert
    out.V = V
    cert.polynomials["V"] = V
    rep = soundness_gate(spec, V, region)
    out.soundness = rep
    if rep.ok:
        out.status = FEASIBLE
    else:
        out.status = UNSOUND
        out.message = (f"soundness sampling found {rep.positivity_violations} positivity and "
                       f"{rep.decrease_violations} decrease violations (worst at {rep.worst_point})")
    return out


def sampling_box(spec: ProblemSpec, region: Box | None) -> Box:
    if region is not None:
        return region
    if spec.region is not None:
        return spec.region
    return Box.symmetric([GLOBAL_SAMPLE_HALF_WIDTH] * len(spec.states))


def sample_region(spec: ProblemSpec, region: Box | None, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points of the sampling box that also satisfy the custom region polynomials."""
    box = sampling_box(spec, region)
    if n <= 0:
        return np.zeros((0, len(spec.states)))
    if not spec.region_polys:
        return box.sample(n, rng)
    cols = [spec.space.index(s) for s in spec.states]
    ds = [CompiledPolynomial(d, cols) for d in spec.region_polys]
    if any(set(d.variables()) - set(cols) for d in spec.region_polys):
        raise ValueError("region polynomials may only involve the states")
    out, have = [], 0
    for _ in range(1000):
        P = box.sample(max(1000, 2 * n), rng)
        keep = np.all([d(P) >= 0 for d in ds], axis=0)
        out.append(P[keep])
        have += int(keep.sum())
        if have >= n:
            return np.concatenate(out)[:n]
    raise ValueError("region polynomials cut out too little of the sampling box")


def soundness_gate(spec: ProblemSpec, V: Polynomial, region: Box | None, n: int | None = None,
                   seed: int | None = None, param_values: dict | None = None) -> SampleReport:
    """Sample V and its derivative along the true closed loop; parameters are drawn
    uniformly from their interval unless fixed by ``param_values``."""
    opts = spec.options
    n = opts.soundness_samples if n is None else n
    rng = np.random.default_rng(opts.seed if seed is None else seed)
    box = sampling_box(spec, region)
    pts = sample_region(spec, region, n, rng)
    params = dict(param_values or {})
    if spec.robustness is not None and spec.robustness.param not in params:
        rb = spec.robustness
        params[rb.param] = rng.uniform(rb.lower, rb.upper, size=len(pts))
    loop = ClosedLoop(spec, params)
    return sample_certificate(V, spec.states, loop, box, n, opts.epsilon, rng, points=pts)


def certify_global(spec: ProblemSpec, backend=None) -> StabilityResult:
    if spec.recast:
        raise ValueError("recast sectors depend on region bounds; global analysis is not available")
    return _solve(spec, None, "global", backend)


def certify_local(spec: ProblemSpec, region: Box | None = None, backend=None) -> StabilityResult:
    region = spec.region if region is None else region
    if region is None and not spec.region_polys:
        raise ValueError("local certification needs a region box or region polynomials")
    if region is not None:
        _check_region(region)
    return _solve(spec, region, "robust" if spec.robustness else "local", backend)


def certify_shrinking(spec: ProblemSpec) -> StabilityResult:
    """Shrink the region about the origin by ``shrink_factor`` until the local program is feasible."""
    if spec.region is None:
        raise ValueError("region shrinking needs an initial region box")
    _check_region(spec.region)
    opts = spec.options
    region = spec.region
    history = []
    res = None
    for it in range(opts.max_shrink + 1):
        res = certify_local(spec, region)
        history.append({"iteration": it, "region": region.to_list(), "status": res.status,
                        "solver_status": res.solver_status, "seconds": res.sizes.get("seconds")})
        log.info("iteration %d region %s -> %s (%s)", it, region.to_list(), res.status, res.solver_status)
        if res.status in (FEASIBLE, UNSOUND):
            break
        region = region.scaled(opts.shrink_factor)
    res.shrink_iterations = len(history) - 1
    res.iterations_log = history
    return res


certify_robust = certify_local


# --------------------------------------------------------------------------
# region of attraction


def even_down(n: int) -> int:
    return max(0, n - (n % 2))


@dataclass
class RoaProgram:
    prog: SosProgram
    gamma: DecisionPoly
    faces: list


def build_roa_program(spec: ProblemSpec, V: Polynomial, region: Box | None, k: int | None = None) -> RoaProgram:
    space = spec.space
    k = spec.degrees.k if k is None else k
    faces = region_faces(spec, region)
    if not faces:
        raise ValueError("ROA estimation needs a bounded region")
    zidx = [space.index(s) for s in spec.states]
    r2k = sum((space.var(s) ** 2 for s in spec.states), space.zero()) ** k
    prog = SosProgram(space, "roa")
    gamma = prog.free_scalar("gamma")
    base = DecisionPoly.from_poly(r2k * V)
    for i, d in enumerate(faces):
        pdeg = even_down(V.degree + 2 * k - d.degree)
        p = prog.sos_poly(f"p{i}", monomials_up_to(zidx, pdeg // 2))
        prog.add_sos(base - gamma * r2k + p * d, f"roa{i}")
    prog.maximize(gamma)
    return RoaProgram(prog, gamma, faces)


def roa_maximize(result: StabilityResult, spec: ProblemSpec, k: int | None = None) -> StabilityResult:
    """Largest gamma with {V <= gamma} inside the certified region, in a single SDP."""
    if result.V is None:
        raise ValueError("ROA estimation needs a feasible Lyapunov certificate")
    k = spec.degrees.k if k is None else k
    rp = build_roa_program(spec, result.V, result.final_region, k)
    res = rp.prog.solve(spec.options.solver, spec.options.psd_tol, spec.options.recon_tol)
    out = replace(result, roa_k=k)
    if not res.feasible:
        out.gamma = None
        out.message = f"ROA program {res.status}: {res.message}"
        return out
    gamma = float(res.certificate.objective_value)
    out.roa_certificate = res.certificate
    out.gamma = gamma
    if gamma <= 0:
        out.message = f"degenerate ROA level gamma = {gamma:.3e}"
    return out


def level_set_contains(V: Polynomial, gamma: float, states: list, points: np.ndarray) -> np.ndarray:
    from .simulator import LyapunovEvaluator
    return LyapunovEvaluator(V, states).value(points) <= gamma


def main_expression_degree(lp: LyapunovProgram) -> int:
    return max((mono_degree(m) for m in lp.expression.support()), default=0)
