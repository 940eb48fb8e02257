"""Sum-of-squares programs compiled to block SDPs.

Unknown polynomials carry coefficients that are affine in scalar decision
variables. A decision variable is either an entry of a PSD Gram block or a
free scalar; SOS polynomials are parametrised through their Gram matrix, so
nonnegativity of multipliers holds by construction of the SDP.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import sdpsolver
from .polyalg import (
    ONE,
    Monomial,
    Polynomial,
    VariableSpace,
    mono_degree,
    mono_key,
    mono_mul,
    mono_str,
    monomials_up_to,
)

log = logging.getLogger(__name__)

CONST = -1


class UncoverableMonomial(ValueError):
    def __init__(self, constraint: str, monomial: str, coefficient: float):
        super().__init__(f"{constraint}: monomial {monomial} (coefficient {coefficient:.6g}) "
                         "cannot be produced by the Gram basis")
        self.monomial = monomial
        self.coefficient = coefficient


class DecisionPoly:
    """Polynomial whose coefficients are affine functions of decision variables.

    ``terms[m]`` maps a decision-variable id (or ``CONST``) to its weight.
    """

    __slots__ = ("space", "terms")

    def __init__(self, space: VariableSpace, terms: dict | None = None):
        self.space = space
        self.terms = terms if terms is not None else {}

    @classmethod
    def from_poly(cls, p: Polynomial) -> "DecisionPoly":
        return cls(p.space, {m: {CONST: c} for m, c in p.terms.items()})

    def copy(self) -> "DecisionPoly":
        return DecisionPoly(self.space, {m: dict(d) for m, d in self.terms.items()})

    def _iadd(self, other: "DecisionPoly", scale: float = 1.0):
        for m, d in other.terms.items():
            tgt = self.terms.setdefault(m, {})
            for k, c in d.items():
                tgt[k] = tgt.get(k, 0.0) + scale * c
        return self

    def __add__(self, other):
        if isinstance(other, Polynomial):
            other = DecisionPoly.from_poly(other)
        return self.copy()._iadd(other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Polynomial):
            other = DecisionPoly.from_poly(other)
        return self.copy()._iadd(other, -1.0)

    def __rsub__(self, other):
        if isinstance(other, Polynomial):
            other = DecisionPoly.from_poly(other)
        return other.copy()._iadd(self, -1.0)

    def __neg__(self):
        return DecisionPoly(self.space, {m: {k: -c for k, c in d.items()} for m, d in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return DecisionPoly(self.space, {m: {k: c * other for k, c in d.items()} for m, d in self.terms.items()})
        if not isinstance(other, Polynomial):
            return NotImplemented
        if other.space is not self.space:
            raise ValueError("variable space mismatch")
        out: dict = {}
        for m2, c2 in other.terms.items():
            for m1, d in self.terms.items():
                tgt = out.setdefault(mono_mul(m1, m2), {})
                for k, c in d.items():
                    tgt[k] = tgt.get(k, 0.0) + c * c2
        return DecisionPoly(self.space, out)

    __rmul__ = __mul__

    def diff(self, v) -> "DecisionPoly":
        i = self.space.index(v)
        out: dict = {}
        for m, d in self.terms.items():
            for j, (idx, e) in enumerate(m):
                if idx == i:
                    nm = m[:j] + (((idx, e - 1),) if e > 1 else ()) + m[j + 1:]
                    tgt = out.setdefault(nm, {})
                    for k, c in d.items():
                        tgt[k] = tgt.get(k, 0.0) + c * e
                    break
        return DecisionPoly(self.space, out)

    def support(self) -> set:
        return {m for m, d in self.terms.items() if any(c != 0.0 for c in d.values())}

    def decision_vars(self) -> set:
        s = set()
        for d in self.terms.values():
            s.update(k for k in d if k != CONST)
        return s

    @property
    def degree(self) -> int:
        return max((mono_degree(m) for m in self.support()), default=-1)

    def value(self, x: np.ndarray) -> Polynomial:
        out = {}
        for m, d in self.terms.items():
            v = 0.0
            for k, c in d.items():
                v += c if k == CONST else c * x[k]
            out[m] = v
        return Polynomial(self.space, out)


@dataclass
class PolyVariable:
    name: str
    basis: list
    ids: list
    poly: DecisionPoly


@dataclass
class GramBlock:
    name: str
    basis: list
    first_id: int

    @property
    def size(self) -> int:
        return len(self.basis)

    @property
    def n_ids(self) -> int:
        return sdpsolver.svec_len(self.size)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        return sdpsolver.svec_to_sym(x[self.first_id:self.first_id + self.n_ids], self.size)


@dataclass
class SosConstraint:
    name: str
    expression: DecisionPoly
    kind: str  # "sos" | "zero"
    gram: GramBlock | None = None

    @property
    def gram_basis(self) -> list:
        return self.gram.basis if self.gram else []


@dataclass
class Certificate:
    polynomials: dict
    gram_matrices: dict
    objective_value: float | None
    diagnostics: dict


class CertificateRejected(RuntimeError):
    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


def gram_basis_for(support: Iterable, variables: Sequence[int] | None = None, bbox: bool = True,
                   diagonal: bool = True) -> list:
    """Candidate Gram basis for an expression with the given monomial support.

    Degrees run from ceil(min_deg/2) to floor(max_deg/2): an odd top degree
    cannot appear in a sum of squares, so those terms are forced to cancel.
    ``bbox`` restricts each variable's exponent to half the range it takes in
    the support; ``diagonal`` iteratively drops monomials m whose square m^2
    is neither in the support nor reachable by another basis pair.
    """
    support = set(support)
    if not support:
        return []
    if variables is None:
        variables = sorted({i for m in support for i, _ in m})
    variables = sorted(variables)
    degs = [mono_degree(m) for m in support]
    lo, hi = math.ceil(min(degs) / 2), max(degs) // 2
    cands = monomials_up_to(variables, hi, lo)
    if bbox:
        emax = {v: 0 for v in variables}
        emin = {v: math.inf for v in variables}
        for m in support:
            dm = dict(m)
            for v in variables:
                e = dm.get(v, 0)
                emax[v] = max(emax[v], e)
                emin[v] = min(emin[v], e)
        lim_hi = {v: emax[v] // 2 for v in variables}
        lim_lo = {v: math.ceil(emin[v] / 2) for v in variables}
        cands = [m for m in cands
                 if all(lim_lo[v] <= dict(m).get(v, 0) <= lim_hi[v] for v in variables)]
    if diagonal:
        cands = prune_diagonal(cands, support)
    return cands


def prune_diagonal(basis: list, support: set) -> list:
    basis = list(basis)
    while True:
        pair_count: dict = {}
        for i in range(len(basis)):
            for j in range(i + 1, len(basis)):
                m = mono_mul(basis[i], basis[j])
                pair_count[m] = pair_count.get(m, 0) + 1
        keep = [b for b in basis
                if mono_mul(b, b) in support or pair_count.get(mono_mul(b, b), 0) > 0]
        if len(keep) == len(basis):
            return basis
        basis = keep


class SosProgram:
    def __init__(self, space: VariableSpace, name: str = "sos"):
        self.space = space
        self.name = name
        self.n_ids = 0
        self.grams: list = []
        self.free_ids: list = []
        self.free_names: list = []
        self.poly_vars: dict = {}
        self.sos_polys: dict = {}
        self.constraints: list = []
        self.objective: dict = {}

    # -- declaration ----------------------------------------------------
    def _alloc(self, n: int) -> int:
        start = self.n_ids
        self.n_ids += n
        return start

    def free_scalar(self, name: str) -> DecisionPoly:
        k = self._alloc(1)
        self.free_ids.append(k)
        self.free_names.append(name)
        return DecisionPoly(self.space, {ONE: {k: 1.0}})

    def free_poly(self, name: str, basis: Sequence) -> DecisionPoly:
        """Polynomial with one free coefficient per basis monomial."""
        basis = sorted(set(basis), key=mono_key)
        ids = []
        terms = {}
        for m in basis:
            k = self._alloc(1)
            self.free_ids.append(k)
            self.free_names.append(f"{name}[{mono_str(m, self.space.names)}]")
            ids.append(k)
            terms[m] = {k: 1.0}
        p = DecisionPoly(self.space, terms)
        self.poly_vars[name] = PolyVariable(name, basis, ids, p)
        return p

    def _gram(self, name: str, basis: Sequence) -> tuple:
        basis = sorted(set(basis), key=mono_key)
        g = GramBlock(name, basis, self._alloc(sdpsolver.svec_len(len(basis))))
        self.grams.append(g)
        terms: dict = {}
        k = g.first_id
        for i in range(len(basis)):
            for j in range(i, len(basis)):
                m = mono_mul(basis[i], basis[j])
                terms.setdefault(m, {})[k] = 1.0 if i == j else 2.0
                k += 1
        return g, DecisionPoly(self.space, terms)

    def sos_poly(self, name: str, basis: Sequence) -> DecisionPoly:
        """Unknown polynomial constrained to Sigma via its own Gram block."""
        g, p = self._gram(name, basis)
        self.sos_polys[name] = (g, p)
        return p

    def add_zero(self, expr: DecisionPoly, name: str = "eq") -> SosConstraint:
        self._check_coverable(expr, name)
        c = SosConstraint(name, expr, "zero")
        self.constraints.append(c)
        return c

    def add_sos(self, expr: DecisionPoly | Polynomial, name: str = "sos", basis: Sequence | None = None,
                bbox: bool = True, diagonal: bool = True) -> SosConstraint:
        if isinstance(expr, Polynomial):
            expr = DecisionPoly.from_poly(expr)
        if basis is None:
            basis = gram_basis_for(expr.support(), bbox=bbox, diagonal=diagonal)
        g, gp = self._gram(name, basis)
        self._check_coverable(expr - gp, name)
        c = SosConstraint(name, expr, "sos", g)
        self.constraints.append(c)
        return c

    def _check_coverable(self, expr: DecisionPoly, name: str):
        tol = self.space.zero_tol
        for m, d in expr.terms.items():
            if all(k == CONST for k, c in d.items() if c != 0.0) and abs(d.get(CONST, 0.0)) > tol:
                raise UncoverableMonomial(name, mono_str(m, self.space.names), d[CONST])

    def maximize(self, expr: DecisionPoly):
        """Linear objective; ``expr`` must be a constant polynomial in the decision variables."""
        extra = [m for m in expr.support() if m != ONE]
        if extra:
            raise ValueError("objective must be a scalar (degree-0) decision expression")
        self.objective = {k: c for k, c in expr.terms.get(ONE, {}).items() if k != CONST}

    # -- lowering -----------------------------------------------------------
    def lower(self, reduce: bool = True) -> "LoweredProgram":
        """Assemble the SDP. With ``reduce``, Gram rows forced to zero by the
        coefficient equations are removed first (a cheap facial reduction)."""
        raw = []
        for con in self.constraints:
            expr = con.expression
            if con.kind == "sos":
                expr = expr - self._gram_poly(con.gram)
            for m in sorted(expr.terms, key=mono_key):
                d = expr.terms[m]
                entries = [(k, c) for k, c in d.items() if k != CONST and c != 0.0]
                if entries or d.get(CONST, 0.0) != 0.0:
                    raw.append(((con.name, m), entries, -d.get(CONST, 0.0)))
        zero = forced_zero_ids(self.grams, raw) if reduce else set()
        col = np.full(self.n_ids, -1, dtype=np.int64)
        sizes, block_names, kept = [], [], {}
        pos = 0
        for g in self.grams:
            keep = [i for i in range(g.size) if _diag_id(g, i) not in zero]
            kept[g.name] = [g.basis[i] for i in keep]
            if not keep:
                continue
            for a, i in enumerate(keep):
                for j in keep[a:]:
                    col[_entry_id(g, i, j)] = pos
                    pos += 1
            sizes.append(len(keep))
            block_names.append(g.name)
        free_names = []
        for k, name in zip(self.free_ids, self.free_names):
            if k in zero:
                continue
            col[k] = pos
            pos += 1
            free_names.append(name)
        rows, cols, vals, rhs, labels = [], [], [], [], []
        r = 0
        for label, entries, b in raw:
            live = [(k, c) for k, c in entries if col[k] >= 0]
            if not live:
                if b != 0.0:
                    # an identity that cannot hold; keep it so the solver reports infeasibility
                    labels.append(label)
                    rhs.append(b)
                    r += 1
                continue
            for k, c in live:
                rows.append(r)
                cols.append(col[k])
                vals.append(c)
            rhs.append(b)
            labels.append(label)
            r += 1
        A = sp.csr_matrix((vals, (rows, cols)), shape=(r, pos))
        A.sum_duplicates()
        c = np.zeros(pos)
        for k, w in self.objective.items():
            if col[k] >= 0:
                c[col[k]] += w
        sdp = sdpsolver.SdpProblem(sizes, len(free_names), A, np.array(rhs), c, labels, block_names, free_names)
        return LoweredProgram(self, sdp, col, kept)

    def _gram_poly(self, g: GramBlock) -> DecisionPoly:
        terms: dict = {}
        k = g.first_id
        for i in range(g.size):
            for j in range(i, g.size):
                m = mono_mul(g.basis[i], g.basis[j])
                terms.setdefault(m, {})[k] = 1.0 if i == j else 2.0
                k += 1
        return DecisionPoly(self.space, terms)

    def solve(self, opts: sdpsolver.SolverOptions | None = None, psd_tol: float = 1e-6,
              recon_tol: float = 1e-6) -> "SosResult":
        low = self.lower()
        sol = sdpsolver.solve(low.sdp, opts)
        return low.result(sol, psd_tol, recon_tol)


@dataclass
class SosResult:
    status: str
    certificate: Certificate | None
    solution: sdpsolver.ConicSolution
    sdp: sdpsolver.SdpProblem
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.certificate is not None


@dataclass
class LoweredProgram:
    program: SosProgram
    sdp: sdpsolver.SdpProblem
    col: np.ndarray
    kept_bases: dict = field(default_factory=dict)

    def ids_vector(self, x_cols: np.ndarray) -> np.ndarray:
        """Map a solver column vector back to decision-id order; eliminated ids are zero."""
        x_cols = np.asarray(x_cols, dtype=float)
        padded = np.append(x_cols, 0.0)
        return padded[np.where(self.col >= 0, self.col, len(x_cols))]

    @property
    def eliminated(self) -> int:
        return int(np.sum(self.col < 0))

    def result(self, sol: sdpsolver.ConicSolution, psd_tol: float = 1e-6, recon_tol: float = 1e-6) -> SosResult:
        stalled = sol.status == sdpsolver.STALLED and sol.x is not None
        if not stalled and sol.status not in (sdpsolver.OPTIMAL, sdpsolver.FEASIBLE):
            return SosResult(sol.status, None, sol, self.sdp, sol.message)
        try:
            cert = self._accept(sol, psd_tol, recon_tol)
        except CertificateRejected as exc:
            if stalled:
                return SosResult(sol.status, None, sol, self.sdp, f"{sol.message}; {exc}")
            return SosResult("rejected", None, sol, self.sdp, str(exc))
        if stalled:
            # weakly feasible programs stall near the boundary; the last iterate
            # still counts because it passed the acceptance layer
            cert.diagnostics["accepted_from_stall"] = True
            return SosResult(sdpsolver.FEASIBLE, cert, sol, self.sdp, f"stalled iterate accepted ({sol.message})")
        return SosResult(sol.status, cert, sol, self.sdp, sol.message)

    def _accept(self, sol: sdpsolver.ConicSolution, psd_tol: float, recon_tol: float) -> Certificate:
        """Reconstruct from the raw iterate, falling back to its projection onto Ax = b."""
        try:
            return reconstruct(self.program, self.ids_vector(sol.x), sol, psd_tol, recon_tol)
        except CertificateRejected as first:
            x = polish(self.sdp, sol.x)
            if x is None:
                raise first
            cert = reconstruct(self.program, self.ids_vector(x), sol, psd_tol, recon_tol)
            cert.diagnostics["polished"] = True
            return cert


def polish(sdp: sdpsolver.SdpProblem, x: np.ndarray, tol: float = 1e-13) -> np.ndarray | None:
    """Minimum-norm correction of ``x`` onto the affine set Ax = b (PSD-ness is re-checked by the caller)."""
    from scipy.sparse.linalg import lsqr
    r = sdp.b - sdp.A @ x
    if not np.all(np.isfinite(r)):
        return None
    dx = lsqr(sdp.A, r, atol=tol, btol=tol, iter_lim=20 * max(sdp.A.shape))[0]
    xn = x + dx
    if np.abs(sdp.A @ xn - sdp.b).max(initial=0.0) >= np.abs(r).max(initial=0.0):
        return None
    return xn


def _entry_id(g: GramBlock, i: int, j: int) -> int:
    if i > j:
        i, j = j, i
    n = g.size
    return g.first_id + i * n - i * (i - 1) // 2 + (j - i)


def _diag_id(g: GramBlock, i: int) -> int:
    return _entry_id(g, i, i)


def forced_zero_ids(grams: Sequence, rows: Sequence) -> set:
    """Decision ids that every feasible point sets to zero.

    Propagates two facts to a fixpoint: a homogeneous row with a single live
    variable fixes it at zero, and a homogeneous row whose live variables are
    all Gram diagonals with coefficients of one sign zeroes those diagonals
    (they are nonnegative). A zero diagonal zeroes its whole Gram row.
    """
    diag = {}
    for g in grams:
        for i in range(g.size):
            diag[_diag_id(g, i)] = (g, i)
    zero: set = set()
    by_id: dict = {}
    for r, (_, entries, _) in enumerate(rows):
        for k, _c in entries:
            by_id.setdefault(k, []).append(r)
    queue = [r for r, (_, _, b) in enumerate(rows) if b == 0.0]
    homogeneous = {r for r in queue}
    while queue:
        r = queue.pop()
        live = [(k, c) for k, c in rows[r][1] if k not in zero]
        if not live:
            continue
        if len(live) == 1:
            hit = [live[0][0]]
        elif all(k in diag for k, _ in live) and (all(c > 0 for _, c in live) or all(c < 0 for _, c in live)):
            hit = [k for k, _ in live]
        else:
            continue
        new = set()
        for k in hit:
            if k in diag:
                g, i = diag[k]
                new.update(_entry_id(g, i, j) for j in range(g.size))
            else:
                new.add(k)
        new -= zero
        zero |= new
        for k in new:
            queue.extend(q for q in by_id.get(k, ()) if q in homogeneous)
    return zero


def reconstruct(prog: SosProgram, x: np.ndarray, sol: sdpsolver.ConicSolution | None = None,
                psd_tol: float = 1e-6, recon_tol: float = 1e-6) -> Certificate:
    """Assemble numeric polynomials and Gram matrices; reject on PSD or identity violations."""
    polys = {}
    for name, pv in prog.poly_vars.items():
        polys[name] = pv.poly.value(x)
    for name, (g, p) in prog.sos_polys.items():
        polys[name] = p.value(x)
    grams = {}
    min_eigs = {}
    residuals = {}
    problems = []
    for g in prog.grams:
        Q = g.matrix(x)
        grams[g.name] = (list(g.basis), Q)
        e = float(np.linalg.eigvalsh(Q)[0]) if g.size else 0.0
        min_eigs[g.name] = e
        if e < -psd_tol:
            problems.append(f"Gram block {g.name} min eigenvalue {e:.3e} < -{psd_tol:g}")
        elif e < 0:
            log.info("Gram block %s min eigenvalue %.3e accepted (psd_tol %.1e)", g.name, e, psd_tol)
    for con in prog.constraints:
        val = con.expression.value(x)
        if con.kind == "sos":
            gp = prog._gram_poly(con.gram).value(x)
            res = (val - gp).max_abs_coef()
        else:
            res = val.max_abs_coef()
        residuals[con.name] = res
        if res > recon_tol:
            problems.append(f"constraint {con.name} reconstruction residual {res:.3e} > {recon_tol:g}")
    obj = None
    if prog.objective:
        obj = float(sum(w * x[k] for k, w in prog.objective.items()))
    diag = {
        "solver_status": sol.status if sol else "external",
        "iterations": sol.iterations if sol else None,
        "primal_residual": sol.primal_residual if sol else None,
        "dual_residual": sol.dual_residual if sol else None,
        "gap": sol.gap if sol else None,
        "min_eigenvalues": min_eigs,
        "reconstruction_residuals": residuals,
    }
    if problems:
        raise CertificateRejected("; ".join(problems), diag)
    return Certificate(polys, grams, obj, diag)


def lower_sos(constraint_expr: DecisionPoly | Polynomial, basis: Sequence | None = None,
              name: str = "sos") -> tuple:
    """Lower a single SOS membership constraint to (SdpProblem, SosProgram)."""
    if isinstance(constraint_expr, Polynomial):
        space = constraint_expr.space
    else:
        space = constraint_expr.space
    prog = SosProgram(space, name)
    prog.add_sos(constraint_expr, name, basis)
    return prog.lower().sdp, prog


def check_sos(p: Polynomial, opts: sdpsolver.SolverOptions | None = None, psd_tol: float = 1e-6,
              recon_tol: float = 1e-6, basis: Sequence | None = None) -> SosResult | None:
    """Decide SOS membership of a numeric polynomial. Returns the result, or None when the
    support is not coverable by any Gram basis (e.g. odd top degree)."""
    prog = SosProgram(p.space, "check")
    try:
        prog.add_sos(p, "p", basis)
    except UncoverableMonomial:
        return None
    return prog.solve(opts, psd_tol, recon_tol)
