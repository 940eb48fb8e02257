"""Sparse multivariate polynomials over a shared, append-only variable space.

Monomials are tuples of ``(var_index, exponent)`` pairs sorted by index with
no zero exponents. Polynomials map monomials to float coefficients and are
treated as immutable values once built.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

DEFAULT_ZERO_TOL = 1e-12

Monomial = tuple  # tuple[tuple[int, int], ...]
ONE: Monomial = ()


class VariableSpaceMismatch(ValueError):
    pass


class UnknownVariable(KeyError):
    pass


class MissingAssignment(KeyError):
    pass


@dataclass(frozen=True)
class VarId:
    name: str
    index: int


class VariableSpace:
    """Bijective name <-> index registry. Indices are dense and never reused."""

    def __init__(self, names: Iterable[str] = (), zero_tol: float = DEFAULT_ZERO_TOL):
        self.names: list[str] = []
        self._index: dict[str, int] = {}
        self.zero_tol = zero_tol
        for n in names:
            self.add(n)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __repr__(self) -> str:
        return f"VariableSpace({self.names!r})"

    def add(self, name: str) -> VarId:
        if name in self._index:
            raise ValueError(f"variable {name!r} already registered")
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
            raise ValueError(f"invalid variable name {name!r}")
        self._index[name] = len(self.names)
        self.names.append(name)
        return VarId(name, self._index[name])

    def ensure(self, name: str) -> VarId:
        if name in self._index:
            return VarId(name, self._index[name])
        return self.add(name)

    def id(self, v: Union[str, int, VarId]) -> VarId:
        if isinstance(v, VarId):
            if v.index >= len(self.names) or self.names[v.index] != v.name:
                raise UnknownVariable(v.name)
            return v
        if isinstance(v, (int, np.integer)):
            if not 0 <= v < len(self.names):
                raise UnknownVariable(v)
            return VarId(self.names[v], int(v))
        try:
            return VarId(v, self._index[v])
        except KeyError:
            raise UnknownVariable(v) from None

    def index(self, v: Union[str, int, VarId]) -> int:
        return self.id(v).index

    def var(self, v: Union[str, int, VarId]) -> "Polynomial":
        i = self.index(v)
        return Polynomial(self, {((i, 1),): 1.0})

    def const(self, c: float) -> "Polynomial":
        return Polynomial(self, {ONE: float(c)})

    def zero(self) -> "Polynomial":
        return Polynomial(self, {})

    def parse(self, text: str, allow_new: bool = False) -> "Polynomial":
        return parse_polynomial(text, self, allow_new=allow_new)


# --------------------------------------------------------------------------
# monomial helpers


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    d = dict(a)
    for i, e in b:
        d[i] = d.get(i, 0) + e
    return tuple(sorted(d.items()))


def mono_degree(m: Monomial) -> int:
    return sum(e for _, e in m)


def mono_dense(m: Monomial) -> tuple:
    if not m:
        return ()
    out = [0] * (m[-1][0] + 1)
    for i, e in m:
        out[i] = e
    return tuple(out)


def mono_key(m: Monomial) -> tuple:
    """Graded lexicographic sort key (ascending)."""
    return (mono_degree(m), mono_dense(m))


def mono_from_dense(exps: Sequence[int]) -> Monomial:
    return tuple((i, int(e)) for i, e in enumerate(exps) if e)


def mono_pow(m: Monomial, k: int) -> Monomial:
    return tuple((i, e * k) for i, e in m)


def mono_vars(m: Monomial) -> set:
    return {i for i, _ in m}


def mono_str(m: Monomial, names: Sequence[str]) -> str:
    if not m:
        return "1"
    return "*".join(names[i] if e == 1 else f"{names[i]}^{e}" for i, e in m)


def monomials_up_to(var_indices: Sequence[int], max_deg: int, min_deg: int = 0) -> list:
    """All monomials in the given variables with min_deg <= degree <= max_deg, grlex sorted."""
    var_indices = sorted(var_indices)
    out = []

    def rec(pos: int, remaining: int, acc: list):
        if pos == len(var_indices):
            out.append(tuple(acc))
            return
        for e in range(remaining, -1, -1):
            if e:
                acc.append((var_indices[pos], e))
            rec(pos + 1, remaining - e, acc)
            if e:
                acc.pop()

    if max_deg >= 0:
        rec(0, max_deg, [])
    out = [m for m in out if mono_degree(m) >= min_deg]
    out.sort(key=mono_key)
    return out


# --------------------------------------------------------------------------


def _fmt_coef(c: float) -> str:
    if c == int(c) and abs(c) < 1e15:
        return str(int(c))
    return repr(float(c))


class Polynomial:
    __slots__ = ("space", "terms")

    def __init__(self, space: VariableSpace, terms: Mapping | None = None, canonical: bool = False):
        self.space = space
        if terms is None:
            self.terms = {}
        elif canonical:
            self.terms = dict(terms)
        else:
            tol = space.zero_tol
            self.terms = {m: float(c) for m, c in terms.items() if abs(c) >= tol}

    # -- structure ---------------------------------------------------------
    def _check(self, other: "Polynomial"):
        if other.space is not self.space:
            raise VariableSpaceMismatch("polynomials live in different variable spaces")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.space.const(float(other))
        return NotImplemented

    @property
    def degree(self) -> int:
        return max((mono_degree(m) for m in self.terms), default=-1)

    @property
    def min_degree(self) -> int:
        return min((mono_degree(m) for m in self.terms), default=-1)

    def is_zero(self) -> bool:
        return not self.terms

    def variables(self) -> set:
        s = set()
        for m in self.terms:
            s.update(i for i, _ in m)
        return s

    def coefficient(self, m: Monomial) -> float:
        return self.terms.get(m, 0.0)

    @property
    def constant(self) -> float:
        return self.terms.get(ONE, 0.0)

    def sorted_terms(self, descending: bool = True) -> list:
        return sorted(self.terms.items(), key=lambda t: mono_key(t[0]), reverse=descending)

    def homogeneous_part(self, deg: int) -> "Polynomial":
        return Polynomial(self.space, {m: c for m, c in self.terms.items() if mono_degree(m) == deg}, canonical=True)

    def max_abs_coef(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.space, {m: -c for m, c in self.terms.items()}, canonical=True)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial(self.space, {m: c * float(other) for m, c in self.terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        out: dict = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = mono_mul(m1, m2)
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial(self.space, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self * (1.0 / float(other))
        return NotImplemented

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("only nonnegative integer powers")
        result = self.space.const(1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = self.space.const(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.space is other.space and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def almost_equal(self, other: "Polynomial", tol: float = 1e-9) -> bool:
        diff = self - other
        return diff.max_abs_coef() <= tol

    # -- calculus / evaluation ----------------------------------------------
    def diff(self, v) -> "Polynomial":
        return differentiate(self, v)

    def __call__(self, point) -> float:
        return evaluate(self, point)

    def subs(self, v, expr) -> "Polynomial":
        return substitute(self, v, expr)

    def __repr__(self):
        return f"Polynomial({self})"

    def __str__(self):
        return format_polynomial(self)


PolyLike = Union[Polynomial, float, int]


def poly_add(a: Polynomial, b: Polynomial) -> Polynomial:
    a._check(b)
    return a + b


def poly_mul(a: Polynomial, b: Polynomial) -> Polynomial:
    a._check(b)
    return a * b


def differentiate(p: Polynomial, v) -> Polynomial:
    i = p.space.index(v)
    out = {}
    for m, c in p.terms.items():
        for j, (idx, e) in enumerate(m):
            if idx == i:
                nm = m[:j] + (((idx, e - 1),) if e > 1 else ()) + m[j + 1:]
                out[nm] = out.get(nm, 0.0) + c * e
                break
    return Polynomial(p.space, out)


def gradient(p: Polynomial, vars_: Sequence) -> list:
    return [differentiate(p, v) for v in vars_]


def _resolve_point(p: Polynomial, point) -> dict:
    if isinstance(point, Mapping):
        vals = {}
        for k, x in point.items():
            vals[p.space.index(k)] = float(x)
        return vals
    arr = np.asarray(point, dtype=float)
    return {i: float(arr[i]) for i in range(len(arr))}


def evaluate(p: Polynomial, point) -> float:
    """Value at a point given as {name|VarId|index: value} or a dense vector over the space."""
    vals = _resolve_point(p, point)
    needed = p.variables()
    missing = needed - vals.keys()
    if missing:
        raise MissingAssignment(", ".join(sorted(p.space.names[i] for i in missing)))
    parts = []
    for m, c in p.terms.items():
        t = c
        for i, e in m:
            t *= vals[i] ** e
        parts.append(t)
    return math.fsum(parts)


class CompiledPolynomial:
    """Vectorised evaluator: coefficients and a dense exponent matrix."""

    def __init__(self, p: Polynomial, columns: Sequence[int] | None = None):
        self.columns = list(columns) if columns is not None else list(range(len(p.space)))
        pos = {v: k for k, v in enumerate(self.columns)}
        missing = p.variables() - pos.keys()
        if missing:
            raise MissingAssignment(", ".join(sorted(p.space.names[i] for i in missing)))
        items = p.sorted_terms(descending=False)
        self.coefs = np.array([c for _, c in items], dtype=float)
        self.exps = np.zeros((len(items), len(self.columns)), dtype=np.int64)
        for r, (m, _) in enumerate(items):
            for i, e in m:
                self.exps[r, pos[i]] = e

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not len(self.coefs):
            return np.zeros(X.shape[0])
        out = np.zeros(X.shape[0])
        for r in range(len(self.coefs)):
            t = np.full(X.shape[0], self.coefs[r])
            for k in np.nonzero(self.exps[r])[0]:
                t = t * X[:, k] ** self.exps[r, k]
            out += t
        return out


def substitute(p: Polynomial, v, expr: PolyLike) -> Polynomial:
    i = p.space.index(v)
    if not isinstance(expr, Polynomial):
        expr = p.space.const(float(expr))
    p._check(expr)
    powers = {0: p.space.const(1.0)}
    acc: dict = {}
    for m, c in p.terms.items():
        e = 0
        rest = []
        for idx, ex in m:
            if idx == i:
                e = ex
            else:
                rest.append((idx, ex))
        if e == 0:
            acc[m] = acc.get(m, 0.0) + c
            continue
        if e not in powers:
            powers[e] = expr ** e
        rest_m = tuple(rest)
        for m2, c2 in powers[e].terms.items():
            nm = mono_mul(rest_m, m2)
            acc[nm] = acc.get(nm, 0.0) + c * c2
    return Polynomial(p.space, acc)


def substitute_many(p: Polynomial, mapping: Mapping) -> Polynomial:
    """Simultaneous substitution {var: expr}."""
    idx = {p.space.index(k): (v if isinstance(v, Polynomial) else p.space.const(float(v))) for k, v in mapping.items()}
    cache: dict = {}
    acc: dict = {}
    for m, c in p.terms.items():
        keep = []
        factor = None
        for i, e in m:
            if i in idx:
                key = (i, e)
                if key not in cache:
                    cache[key] = idx[i] ** e
                factor = cache[key] if factor is None else factor * cache[key]
            else:
                keep.append((i, e))
        keep_m = tuple(keep)
        if factor is None:
            acc[keep_m] = acc.get(keep_m, 0.0) + c
        else:
            for m2, c2 in factor.terms.items():
                nm = mono_mul(keep_m, m2)
                acc[nm] = acc.get(nm, 0.0) + c * c2
    return Polynomial(p.space, acc)


# --------------------------------------------------------------------------
# text format


def format_polynomial(p: Polynomial) -> str:
    if not p.terms:
        return "0"
    names = p.space.names
    pieces = []
    for k, (m, c) in enumerate(p.sorted_terms()):
        sign = "-" if c < 0 else "+"
        a = abs(c)
        if not m:
            body = _fmt_coef(a)
        elif a == 1.0:
            body = mono_str(m, names)
        else:
            body = f"{_fmt_coef(a)}*{mono_str(m, names)}"
        if k == 0:
            pieces.append(body if sign == "+" else f"-{body}")
        else:
            pieces.append(f" {sign} {body}")
    return "".join(pieces)


class PolynomialParseError(ValueError):
    def __init__(self, msg: str, text: str, pos: int):
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line = line
        self.column = col


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text: str):
    pos = 0
    toks = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolynomialParseError(f"unexpected character {text[pos:].lstrip()[:1]!r}", text, len(text) - len(text[pos:].lstrip()))
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), start))
        pos = m.end()
    toks.append(("end", "", len(text)))
    return toks


class _Parser:
    """expr := term (('+'|'-') term)* ; term := unary (('*'|'/') unary)* ;
    unary := ('-'|'+') unary | power ; power := atom (('^'|'**') int)? ; atom := num | name | '(' expr ')'"""

    def __init__(self, text: str, space: VariableSpace, allow_new: bool):
        self.text = text
        self.space = space
        self.allow_new = allow_new
        self.toks = _tokenize(text)
        self.k = 0

    def peek(self):
        return self.toks[self.k]

    def take(self):
        t = self.toks[self.k]
        self.k += 1
        return t

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        raise PolynomialParseError(msg, self.text, tok[2])

    def parse(self) -> Polynomial:
        p = self.expr()
        if self.peek()[0] != "end":
            self.error(f"unexpected token {self.peek()[1]!r}")
        return p

    def expr(self):
        p = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            q = self.term()
            p = p + q if op == "+" else p - q
        return p

    def term(self):
        p = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            op = self.take()
            q = self.unary()
            if op[1] == "*":
                p = p * q
            else:
                if q.degree > 0 or q.is_zero():
                    self.error("division only by nonzero constants", op)
                p = p / q.constant
        return p

    def unary(self):
        t = self.peek()
        if t[0] == "op" and t[1] in ("-", "+"):
            self.take()
            p = self.unary()
            return -p if t[1] == "-" else p
        return self.power()

    def power(self):
        p = self.atom()
        t = self.peek()
        if t[0] == "op" and t[1] in ("^", "**"):
            self.take()
            e = self.take()
            if e[0] != "num" or not re.fullmatch(r"\d+", e[1]):
                self.error("exponent must be a nonnegative integer", e)
            p = p ** int(e[1])
        return p

    def atom(self):
        t = self.take()
        if t[0] == "num":
            return self.space.const(float(t[1]))
        if t[0] == "name":
            if t[1] not in self.space:
                if not self.allow_new:
                    self.error(f"unknown variable {t[1]!r}", t)
                self.space.add(t[1])
            return self.space.var(t[1])
        if t[0] == "op" and t[1] == "(":
            p = self.expr()
            if self.peek()[1] != ")":
                self.error("expected ')'")
            self.take()
            return p
        self.error(f"unexpected token {t[1]!r}" if t[0] != "end" else "unexpected end of input", t)


def parse_polynomial(text: str, space: VariableSpace, allow_new: bool = False) -> Polynomial:
    return _Parser(text, space, allow_new).parse()
