"""Semialgebraic over-approximation of the closed loop.

The network graph, the plant recasting, input saturation and parameter
uncertainty are all expressed as polynomial inequalities g >= 0 and
equalities h = 0 over one shared variable space. Pre-activations are by
default substituted away so the SOS variables are the states plus one
post-activation variable per hidden node.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .nnmodel import Box, IbpBounds, NeuralNetwork
from .polyalg import Polynomial, VariableSpace, format_polynomial

log = logging.getLogger(__name__)

TAGS = (
    "relu-sign",
    "relu-complementarity",
    "relu-active",
    "ibp-box",
    "tanh-sector",
    "slope",
    "affine",
    "region",
    "saturation",
    "recast-sector",
    "robustness",
)

SLOPE_MODES = ("none", "intra", "all")


@dataclass
class Constraint:
    poly: Polynomial
    tag: str
    label: str = ""

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown constraint tag {self.tag!r}")


@dataclass
class SemialgebraicSet:
    """g_i >= 0 (inequalities), h_j = 0 (equalities) and region polynomials d_k >= 0."""

    space: VariableSpace
    inequalities: list = field(default_factory=list)
    equalities: list = field(default_factory=list)
    region: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def ineq(self, poly: Polynomial, tag: str, label: str = ""):
        self.inequalities.append(Constraint(poly, tag, label))

    def eq(self, poly: Polynomial, tag: str, label: str = ""):
        self.equalities.append(Constraint(poly, tag, label))

    def reg(self, poly: Polynomial, label: str = ""):
        self.region.append(Constraint(poly, "region", label))

    def extend(self, other: "SemialgebraicSet") -> "SemialgebraicSet":
        if other.space is not self.space:
            raise ValueError("variable space mismatch")
        self.inequalities += other.inequalities
        self.equalities += other.equalities
        self.region += other.region
        self.notes += other.notes
        return self

    def count(self, tag: str | None = None, kind: str | None = None) -> int:
        groups = {"ineq": self.inequalities, "eq": self.equalities, "region": self.region}
        pools = [groups[kind]] if kind else list(groups.values())
        return sum(1 for pool in pools for c in pool if tag is None or c.tag == tag)

    def variables(self) -> set:
        s = set()
        for c in self.inequalities + self.equalities + self.region:
            s |= c.poly.variables()
        return s

    def dump(self) -> str:
        lines = []
        for head, pool, rel in (("inequalities", self.inequalities, ">= 0"),
                                ("equalities", self.equalities, "= 0"),
                                ("region", self.region, ">= 0")):
            lines.append(f"# {head} ({len(pool)})")
            for c in pool:
                lab = f" {c.label}" if c.label else ""
                lines.append(f"[{c.tag}]{lab}: {format_polynomial(c.poly)} {rel}")
        for n in self.notes:
            lines.append(f"# note: {n}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# network encoding


@dataclass
class NetworkEncoding:
    """Symbolic form of the network graph.

    ``pre[k][i]`` is the pre-activation of node i in hidden layer k, either an
    affine polynomial in the previous layer's variables or a dedicated
    variable when pre-activations are kept. ``post[k][i]`` is the node's
    post-activation variable and ``output`` the affine output polynomials.
    """

    nn: NeuralNetwork
    post_names: list
    pre_names: list | None
    pre: list
    post: list
    output: list
    affine: list  # (pre variable poly, affine expression) when pre-activations are kept

    def nodes(self):
        for k, layer in enumerate(self.post):
            for i in range(len(layer)):
                yield k, i


def node_name(prefix: str, layer: int, i: int) -> str:
    return f"{prefix}{layer + 1}_{i + 1}"


def encode_network(nn: NeuralNetwork, space: VariableSpace, inputs: Sequence[str],
                   prefix: str = "nn", keep_preactivations: bool = False) -> NetworkEncoding:
    if len(inputs) != nn.n_in:
        raise ValueError(f"network expects {nn.n_in} inputs, got {len(inputs)}")
    x = [space.var(n) for n in inputs]
    pre, post, post_names, affine = [], [], [], []
    pre_names = [] if keep_preactivations else None
    for k, (W, b) in enumerate(zip(nn.weights[:-1], nn.biases[:-1])):
        exprs = [_affine(space, W[i], b[i], x) for i in range(W.shape[0])]
        if keep_preactivations:
            names = [node_name("v" + prefix, k, i) for i in range(W.shape[0])]
            pv = [space.var(space.ensure(n)) for n in names]
            affine += list(zip(pv, exprs))
            pre_names.append(names)
            pre.append(pv)
        else:
            pre.append(exprs)
        names = [node_name(prefix, k, i) for i in range(W.shape[0])]
        x = [space.var(space.ensure(n)) for n in names]
        post_names.append(names)
        post.append(x)
    W, b = nn.weights[-1], nn.biases[-1]
    out = [_affine(space, W[i], b[i], x) for i in range(W.shape[0])]
    return NetworkEncoding(nn, post_names, pre_names, pre, post, out, affine)


def _affine(space: VariableSpace, w, b, xs) -> Polynomial:
    terms = {(): float(b)}
    for wi, xi in zip(w, xs):
        for m, c in xi.terms.items():
            terms[m] = terms.get(m, 0.0) + float(wi) * c
    return Polynomial(space, terms)


def affine_equalities(enc: NetworkEncoding) -> SemialgebraicSet:
    s = SemialgebraicSet(_space_of(enc))
    for v, e in enc.affine:
        s.eq(v - e, "affine")
    return s


def _space_of(enc: NetworkEncoding) -> VariableSpace:
    return enc.post[0][0].space if enc.post and enc.post[0] else enc.output[0].space


def relu_constraints(enc: NetworkEncoding, bounds: IbpBounds | None = None) -> SemialgebraicSet:
    """Sign, complementarity and IBP box constraints per ReLU node.

    Without bounds only the globally valid sign/complementarity constraints
    are emitted. A node IBP proves inactive (v_hi <= 0) becomes phi = 0; a
    node proven active (v_lo >= 0) gets phi - v = 0 instead of the
    complementarity product.
    """
    if enc.nn.activation != "relu":
        raise ValueError("relu_constraints requires a ReLU network")
    s = affine_equalities(enc)
    for k, i in enc.nodes():
        phi, v = enc.post[k][i], enc.pre[k][i]
        lab = enc.post_names[k][i]
        if bounds is not None and bounds.pre_upper[k][i] <= 0.0:
            s.eq(phi, "ibp-box", lab + " inactive")
            continue
        s.ineq(phi, "relu-sign", lab)
        s.ineq(phi - v, "relu-sign", lab)
        if bounds is not None and bounds.pre_lower[k][i] >= 0.0:
            s.eq(phi - v, "relu-active", lab)
        else:
            s.eq(phi * (phi - v), "relu-complementarity", lab)
        if bounds is not None:
            s.ineq(phi - float(bounds.post_lower[k][i]), "ibp-box", lab)
            s.ineq(float(bounds.post_upper[k][i]) - phi, "ibp-box", lab)
    return s


def tanh_sector_alpha(lo: float, hi: float) -> float:
    """Lower slope of the tightest sector [alpha, 1] containing tanh over [lo, hi]."""
    def chord(x):
        return 1.0 if abs(x) < 1e-12 else math.tanh(x) / x
    return min(chord(lo), chord(hi))


def tanh_sector_constraints(enc: NetworkEncoding, bounds: IbpBounds | None = None) -> SemialgebraicSet:
    if enc.nn.activation != "tanh":
        raise ValueError("tanh_sector_constraints requires a tanh network")
    s = affine_equalities(enc)
    for k, i in enc.nodes():
        phi, v = enc.post[k][i], enc.pre[k][i]
        lab = enc.post_names[k][i]
        if bounds is None:
            alpha = 0.0
        else:
            lo, hi = float(bounds.pre_lower[k][i]), float(bounds.pre_upper[k][i])
            alpha = tanh_sector_alpha(lo, hi)
            if lo > 0 or hi < 0:
                s.notes.append(f"{lab}: interval [{lo:.4g}, {hi:.4g}] excludes 0; sector widened to pass through the origin")
        s.ineq((phi - alpha * v) * (v - phi), "tanh-sector", f"{lab} alpha={alpha!r}")
        if bounds is not None:
            s.ineq(phi - float(bounds.post_lower[k][i]), "ibp-box", lab)
            s.ineq(float(bounds.post_upper[k][i]) - phi, "ibp-box", lab)
    return s


def slope_pairs(enc: NetworkEncoding, mode: str = "intra") -> list:
    if mode not in SLOPE_MODES:
        raise ValueError(f"slope mode must be one of {SLOPE_MODES}")
    if mode == "none":
        return []
    nodes = list(enc.nodes())
    if mode == "all":
        return list(combinations(nodes, 2))
    return [(a, b) for a, b in combinations(nodes, 2) if a[0] == b[0]]


def slope_constraints(enc: NetworkEncoding, mode: str = "intra", alpha: float = 0.0,
                      beta: float = 1.0) -> SemialgebraicSet:
    """Pairwise slope-restriction constraints; ReLU and tanh both have slopes in [0, 1]."""
    s = SemialgebraicSet(_space_of(enc))
    for (ka, ia), (kb, ib) in slope_pairs(enc, mode):
        dphi = enc.post[ka][ia] - enc.post[kb][ib]
        dv = enc.pre[ka][ia] - enc.pre[kb][ib]
        s.ineq((dphi - alpha * dv) * (beta * dv - dphi), "slope",
               f"{enc.post_names[ka][ia]},{enc.post_names[kb][ib]}")
    return s


# --------------------------------------------------------------------------
# plant-side constraints


def region_constraints(space: VariableSpace, states: Sequence[str], region: Box | None = None,
                       polynomials: Sequence[Polynomial] = ()) -> SemialgebraicSet:
    s = SemialgebraicSet(space)
    if region is not None:
        if region.dim != len(states):
            raise ValueError(f"region has {region.dim} dimensions for {len(states)} states")
        for name, lo, hi in zip(states, region.lower, region.upper):
            z = space.var(name)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"region bound for {name} must be finite")
            s.reg(z - float(lo), f"{name} >= {lo:g}")
            s.reg(float(hi) - z, f"{name} <= {hi:g}")
    for p in polynomials:
        s.reg(p, "custom")
    return s


def recast_alpha(lo: float, hi: float) -> float:
    """Sector slope for z - sin(z) over [lo, hi]: max of the chord slopes at both ends."""
    def chord(x):
        if abs(x) < 1e-8:
            return x * x / 6.0  # (x - sin x)/x ~ x^2/6
        return (x - math.sin(x)) / x
    return max(chord(lo), chord(hi))


def recast_sector_constraint(space: VariableSpace, var: str, driver: str, alpha: float) -> Polynomial:
    if alpha < 0:
        raise ValueError("recast sector slope must be nonnegative")
    z3, z1 = space.var(var), space.var(driver)
    return z3 * (alpha * z1 - z3)


def saturation_constraints(space: VariableSpace, w_var: str, u: Polynomial, u_max: float,
                           ibp_u: tuple | None = None) -> SemialgebraicSet:
    """Link the saturated input variable ``w_var`` to the raw network output ``u``.

    When IBP shows |u| <= u_max the saturation is inactive and w = u is exact;
    otherwise sat(u) lies in the sector [kappa, 1] with kappa = u_max / max|u|
    (kappa = 0 without bounds).
    """
    s = SemialgebraicSet(space)
    if u_max is None or math.isinf(u_max):
        return s
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    w = space.var(w_var)
    s.ineq(u_max - w, "saturation", f"{w_var} <= {u_max:g}")
    s.ineq(w + u_max, "saturation", f"{w_var} >= {-u_max:g}")
    if ibp_u is not None and max(abs(ibp_u[0]), abs(ibp_u[1])) <= u_max:
        s.eq(w - u, "saturation", f"{w_var} = network output (saturation inactive)")
        s.notes.append(f"saturation on {w_var} inactive over the region (|u| <= {max(abs(ibp_u[0]), abs(ibp_u[1])):.4g})")
    else:
        kappa = 0.0 if ibp_u is None else u_max / max(abs(ibp_u[0]), abs(ibp_u[1]))
        s.ineq((w - kappa * u) * (u - w), "saturation", f"{w_var} sector kappa={kappa!r}")
        s.notes.append(f"saturation on {w_var} encoded as sector [{kappa:.4g}, 1]")
    return s


def robustness_constraints(space: VariableSpace, delta: str, lo: float, hi: float) -> Polynomial:
    if not lo < hi:
        raise ValueError(f"parameter interval [{lo}, {hi}] is empty or degenerate")
    d = space.var(delta)
    return (hi - d) * (d - lo)


def saturate(u, u_max):
    return np.clip(u, -u_max, u_max)
