"""Closed-loop problem definitions and their TOML file format."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .nnmodel import Box, NeuralNetwork, check_equilibrium
from .polyalg import (CompiledPolynomial, Polynomial, PolynomialParseError, VariableSpace, format_polynomial,
                      parse_polynomial)
from .sdpsolver import SolverOptions

# rule name -> true value of the auxiliary state as a function of its driver
RECAST_RULES = {
    "x_minus_sin": lambda x: x - np.sin(x),
}


class DefinitionError(ValueError):
    pass


def even_up(n: int) -> int:
    return max(0, n + (n % 2))


@dataclass
class Degrees:
    """Polynomial degrees. ``s``, ``t`` and ``p`` default from ``v``."""

    v: int = 2
    s: int | None = None
    t: int | None = None
    p: int | None = None
    k: int = 1

    def __post_init__(self):
        if self.v < 2 or self.v % 2:
            raise ValueError("V degree must be even and at least 2")
        if self.k < 1:
            raise ValueError("k must be a positive integer")

    @property
    def s_deg(self) -> int:
        return self.s if self.s is not None else even_up(self.v - 2)

    @property
    def p_deg(self) -> int:
        return self.p if self.p is not None else even_up(self.v - 2)

    @property
    def t_deg(self) -> int:
        return self.t if self.t is not None else self.v - 1

    def with_multiplier_degree(self, n: int) -> "Degrees":
        return replace(self, s=n, t=n, p=n)

    def to_dict(self) -> dict:
        return {"v": self.v, "s": self.s_deg, "t": self.t_deg, "p": self.p_deg, "k": self.k}


@dataclass
class Options:
    epsilon: float = 1e-4
    decrease_margin: float | None = None
    slope: str = "intra"
    mult_vars: str = "all"
    keep_preactivations: bool = False
    shrink_factor: float = 0.75
    max_shrink: int = 10
    psd_tol: float = 1e-6
    recon_tol: float = 1e-6
    soundness_samples: int = 10_000
    seed: int = 0
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.shrink_factor < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        if self.mult_vars not in ("all", "state"):
            raise ValueError("mult_vars must be 'all' or 'state'")

    @property
    def margin(self) -> float:
        return self.epsilon if self.decrease_margin is None else self.decrease_margin

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "decrease_margin": self.margin,
            "slope": self.slope,
            "mult_vars": self.mult_vars,
            "keep_preactivations": self.keep_preactivations,
            "shrink_factor": self.shrink_factor,
            "max_shrink": self.max_shrink,
            "psd_tol": self.psd_tol,
            "recon_tol": self.recon_tol,
            "soundness_samples": self.soundness_samples,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class RecastRule:
    """Auxiliary state ``var`` standing for a non-polynomial function of ``driver``."""

    var: str
    driver: str
    rule: str = "x_minus_sin"

    def __post_init__(self):
        if self.rule not in RECAST_RULES:
            raise DefinitionError(f"unknown recast rule {self.rule!r}; known: {sorted(RECAST_RULES)}")

    def value(self, x):
        return RECAST_RULES[self.rule](x)

    def alpha(self, lo: float, hi: float) -> float:
        from .abstraction import recast_alpha
        return recast_alpha(lo, hi)


@dataclass(frozen=True)
class Robustness:
    param: str
    lower: float
    upper: float
    nominal: float | None = None

    def __post_init__(self):
        if not self.lower < self.upper:
            raise DefinitionError(f"parameter interval [{self.lower}, {self.upper}] is empty or degenerate")


@dataclass
class ProblemSpec:
    name: str
    space: VariableSpace
    states: list
    inputs: list
    dynamics: list
    network: NeuralNetwork | None
    region: Box | None = None
    region_polys: list = field(default_factory=list)
    recast: list = field(default_factory=list)
    u_max: float | None = None
    robustness: Robustness | None = None
    degrees: Degrees = field(default_factory=Degrees)
    options: Options = field(default_factory=Options)
    hashes: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.dynamics) != len(self.states):
            raise DefinitionError("need one dynamics polynomial per state")
        if self.network is not None:
            if self.network.n_in != len(self.states):
                raise DefinitionError(f"network input width {self.network.n_in} != {len(self.states)} states")
            if self.network.n_out != len(self.inputs):
                raise DefinitionError(f"network output width {self.network.n_out} != {len(self.inputs)} inputs")

    @property
    def params(self) -> list:
        return [self.robustness.param] if self.robustness else []

    @property
    def recast_vars(self) -> list:
        return [r.var for r in self.recast]

    def closed_loop(self, param_values: dict | None = None) -> "ClosedLoop":
        return ClosedLoop(self, param_values or {})

    def controller(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(Z)
        if self.network is None:
            return np.zeros((Z.shape[0], len(self.inputs)))
        return self.network.forward_batch(Z)

    def equilibrium(self, tol: float = 1e-8):
        nn = self.network
        if nn is None:
            nn = NeuralNetwork((np.zeros((len(self.inputs), len(self.states))),), (np.zeros(len(self.inputs)),))
        params = {p: (self.robustness.nominal if self.robustness.nominal is not None else
                      0.5 * (self.robustness.lower + self.robustness.upper)) for p in self.params}
        loop = ClosedLoop(replace(self, network=nn), params)

        def f(z, u):
            return loop.rhs(np.atleast_2d(z), np.atleast_2d(u))[0]
        return check_equilibrium(nn, f, tol)


class ClosedLoop:
    """True closed-loop vector field: network controller, saturation and the
    non-polynomial recast functions evaluated exactly."""

    def __init__(self, spec: ProblemSpec, param_values: dict):
        self.spec = spec
        missing = set(spec.params) - set(param_values)
        if missing:
            raise ValueError(f"missing parameter values for {sorted(missing)}")
        self.params = dict(param_values)
        self.columns = spec.states + spec.recast_vars + spec.inputs + spec.params
        cols = [spec.space.index(n) for n in self.columns]
        self.f = [CompiledPolynomial(p, cols) for p in spec.dynamics]

    def rhs(self, Z: np.ndarray, U: np.ndarray) -> np.ndarray:
        spec = self.spec
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if spec.u_max is not None:
            U = np.clip(U, -spec.u_max, spec.u_max)
        parts = [Z]
        for r in spec.recast:
            parts.append(r.value(Z[:, spec.states.index(r.driver)])[:, None])
        parts.append(U)
        for p in spec.params:
            parts.append(np.broadcast_to(np.asarray(self.params[p], dtype=float), (Z.shape[0],))[:, None])
        X = np.hstack(parts)
        return np.stack([f(X) for f in self.f], axis=1)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return self.rhs(Z, self.spec.controller(Z))


# --------------------------------------------------------------------------
# TOML definitions


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _poly(text: str, space: VariableSpace, where: str) -> Polynomial:
    try:
        return parse_polynomial(str(text), space)
    except PolynomialParseError as exc:
        raise DefinitionError(f"{where}: {exc}") from exc


def load_definition(path, overrides: dict | None = None) -> ProblemSpec:
    """Parse a system definition file; paths inside it are relative to the file."""
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise DefinitionError(f"{path}: {exc}") from exc
    return definition_from_dict(raw, base=path.parent, name=path.stem,
                                hashes={"definition": sha256_file(path)}, overrides=overrides)


def definition_from_dict(raw: dict, base: Path = Path("."), name: str = "system", hashes: dict | None = None,
                         overrides: dict | None = None) -> ProblemSpec:
    hashes = dict(hashes or {})
    states = list(raw.get("states", []))
    if not states:
        raise DefinitionError("'states' must list at least one state")
    inputs = list(raw.get("inputs", ["u"]))
    recast = [RecastRule(r["var"], r["driver"], r.get("rule", "x_minus_sin")) for r in raw.get("recast", [])]
    rob = None
    if "robustness" in raw:
        r = raw["robustness"]
        lo, hi = r["interval"]
        rob = Robustness(r["param"], float(lo), float(hi), r.get("nominal"))
    names = states + [r.var for r in recast] + inputs + ([rob.param] if rob else [])
    if len(set(names)) != len(names):
        raise DefinitionError(f"variable names must be unique: {names}")
    space = VariableSpace(names)
    dyn_raw = raw.get("dynamics", {})
    unknown = set(dyn_raw) - set(states)
    if unknown:
        raise DefinitionError(f"dynamics given for undeclared states {sorted(unknown)}")
    dynamics = []
    for s in states:
        if s not in dyn_raw:
            raise DefinitionError(f"missing dynamics for state {s}")
        dynamics.append(_poly(dyn_raw[s], space, f"dynamics.{s}"))
    network = None
    if raw.get("network"):
        npath = (base / raw["network"])
        if not npath.exists():
            raise DefinitionError(f"network file {npath} not found")
        network = NeuralNetwork.load(npath)
        hashes["network"] = sha256_file(npath)
    region, region_polys = None, []
    if "region" in raw:
        reg = raw["region"]
        if "lower" in reg or "upper" in reg:
            try:
                region = Box(reg["lower"], reg["upper"])
            except (KeyError, ValueError) as exc:
                raise DefinitionError(f"region: malformed box ({exc})") from exc
            if region.dim != len(states):
                raise DefinitionError(f"region box has {region.dim} dimensions for {len(states)} states")
        region_polys = [_poly(t, space, "region.polynomials") for t in reg.get("polynomials", [])]
    u_max = None
    if "saturation" in raw:
        u_max = float(raw["saturation"]["u_max"])
        if not u_max > 0:
            raise DefinitionError("saturation.u_max must be positive")
        if math.isinf(u_max):
            u_max = None
    deg = dict(raw.get("degrees", {}))
    opt = dict(raw.get("options", {}))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k.startswith("deg_"):
            deg[k[4:]] = v
        else:
            opt[k] = v
    try:
        degrees = Degrees(**deg)
        solver_opts = SolverOptions(**opt.pop("solver", {}))
        options = Options(solver=solver_opts, **opt)
    except TypeError as exc:
        raise DefinitionError(f"unknown degree or option key: {exc}") from exc
    return ProblemSpec(raw.get("name", name), space, states, inputs, dynamics, network, region, region_polys,
                       recast, u_max, rob, degrees, options, hashes)


def definition_to_dict(spec: ProblemSpec, network_file: str | None = None) -> dict:
    """Inverse of :func:`definition_from_dict` (the network is referenced by file name)."""
    raw: dict = {"name": spec.name, "states": list(spec.states), "inputs": list(spec.inputs)}
    if spec.network is not None:
        if network_file is None:
            raise ValueError("a spec with a network needs the weight file name")
        raw["network"] = network_file
    if spec.recast:
        raw["recast"] = [{"var": r.var, "driver": r.driver, "rule": r.rule} for r in spec.recast]
    raw["dynamics"] = {s: format_polynomial(f) for s, f in zip(spec.states, spec.dynamics)}
    if spec.u_max is not None:
        raw["saturation"] = {"u_max": spec.u_max}
    if spec.robustness is not None:
        rb = spec.robustness
        raw["robustness"] = {"param": rb.param, "interval": [rb.lower, rb.upper]}
        if rb.nominal is not None:
            raw["robustness"]["nominal"] = rb.nominal
    region: dict = {}
    if spec.region is not None:
        region["lower"] = spec.region.lower.tolist()
        region["upper"] = spec.region.upper.tolist()
    if spec.region_polys:
        region["polynomials"] = [format_polynomial(d) for d in spec.region_polys]
    if region:
        raw["region"] = region
    raw["degrees"] = spec.degrees.to_dict()
    opts = spec.options.to_dict()
    opts["solver"] = asdict(spec.options.solver)
    raw["options"] = opts
    return raw


def save_definition(spec: ProblemSpec, path, network_file: str | None = None) -> None:
    """Write a definition file; the network weights go next to it as ``network_file``."""
    path = Path(path)
    if spec.network is not None:
        network_file = network_file or f"{path.stem}_nn.json"
        spec.network.save(path.parent / network_file)
    path.write_text(tomli_w.dumps(definition_to_dict(spec, network_file)))


def dynamics_with_param(spec: ProblemSpec, value: float) -> ProblemSpec:
    """Copy of a robust spec with the parameter fixed (dynamics substituted)."""
    from .polyalg import substitute
    if spec.robustness is None:
        return spec
    dyn = [substitute(f, spec.robustness.param, value) for f in spec.dynamics]
    return replace(spec, dynamics=dyn, robustness=None)


def region_faces(spec: ProblemSpec, region: Box | None) -> list:
    """Region polynomials d_k >= 0 for a box plus any custom polynomials."""
    out = []
    if region is not None:
        for name, lo, hi in zip(spec.states, region.lower, region.upper):
            z = spec.space.var(name)
            out += [z - float(lo), float(hi) - z]
    return out + list(spec.region_polys)


def state_columns(spec: ProblemSpec) -> list:
    return [spec.space.index(n) for n in spec.states]
