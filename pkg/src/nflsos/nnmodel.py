"""Feed-forward controller networks, forward passes and interval bound propagation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh")


def activate(kind: str, v):
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "tanh":
        return np.tanh(v)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_widths) -> "Box":
        h = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return cls(-h, h)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, z, tol: float = 0.0) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.all((z >= self.lower - tol) & (z <= self.upper + tol), axis=1)

    def contains_origin_strictly(self) -> bool:
        return bool(np.all(self.lower < 0) and np.all(self.upper > 0))

    def scaled(self, factor: float) -> "Box":
        return Box(self.lower * factor, self.upper * factor)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*[[lo, hi] for lo, hi in zip(self.lower, self.upper)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def is_subset_of(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol))

    def to_list(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.lower, self.upper)]


@dataclass
class Trace:
    """Per hidden layer pre-activations ``v[k]`` and post-activations ``x[k]``."""

    pre: list
    post: list
    output: np.ndarray


@dataclass
class IbpBounds:
    pre_lower: list
    pre_upper: list
    post_lower: list
    post_upper: list
    out_lower: np.ndarray
    out_upper: np.ndarray


@dataclass(frozen=True)
class NeuralNetwork:
    """``weights[k]`` has shape (n_{k+1}, n_k); the last (W, b) pair is the affine output layer."""

    weights: tuple
    biases: tuple
    activation: str = "relu"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        Ws = tuple(np.atleast_2d(np.asarray(W, dtype=float)) for W in self.weights)
        bs = tuple(np.atleast_1d(np.asarray(b, dtype=float)) for b in self.biases)
        if len(Ws) != len(bs) or not Ws:
            raise ValueError("need matching, nonempty weight and bias lists")
        for k, (W, b) in enumerate(zip(Ws, bs)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: bias length {b.shape[0]} != rows {W.shape[0]}")
            if k and W.shape[1] != Ws[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input width {W.shape[1]} != previous output {Ws[k - 1].shape[0]}")
        for a in Ws + bs:
            a.setflags(write=False)
        object.__setattr__(self, "weights", Ws)
        object.__setattr__(self, "biases", bs)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_sizes(self) -> list:
        return [W.shape[0] for W in self.weights[:-1]]

    @property
    def n_hidden(self) -> int:
        return sum(self.hidden_sizes)

    # -- io --------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "NeuralNetwork":
        layers = d["layers"]
        return cls(
            tuple(np.array(L["W"], dtype=float) for L in layers),
            tuple(np.array(L["b"], dtype=float) for L in layers),
            d.get("activation", "relu"),
            {k: v for k, v in d.items() if k not in ("layers", "activation")},
        )

    @classmethod
    def load(cls, path) -> "NeuralNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = {
            "activation": self.activation,
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
        }
        d.update(self.meta)
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def with_output_shift(self, delta) -> "NeuralNetwork":
        bs = list(self.biases)
        bs[-1] = bs[-1] - np.asarray(delta, dtype=float)
        return NeuralNetwork(self.weights, tuple(bs), self.activation, dict(self.meta))

    # -- evaluation --------------------------------------------------------
    def forward(self, z) -> np.ndarray:
        return nn_forward(self, z)[0]

    def forward_batch(self, Z: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(Z, dtype=float))
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            x = activate(self.activation, x @ W.T + b)
        return x @ self.weights[-1].T + self.biases[-1]

    def trace_batch(self, Z: np.ndarray) -> Trace:
        """Forward pass over rows of Z keeping every hidden pre/post activation."""
        x = np.atleast_2d(np.asarray(Z, dtype=float))
        if x.shape[1] != self.n_in:
            raise ValueError(f"input dimension {x.shape[1]} != {self.n_in}")
        pre, post = [], []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            v = x @ W.T + b
            x = activate(self.activation, v)
            pre.append(v)
            post.append(x)
        out = x @ self.weights[-1].T + self.biases[-1]
        return Trace(pre, post, out)


def nn_forward(nn: NeuralNetwork, z) -> tuple:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (nn.n_in,):
        raise ValueError(f"input dimension {z.shape} != ({nn.n_in},)")
    tr = nn.trace_batch(z[None, :])
    trace = Trace([v[0] for v in tr.pre], [x[0] for x in tr.post], tr.output[0])
    return tr.output[0], trace


def ibp(nn: NeuralNetwork, region: Box) -> IbpBounds:
    if region.dim != nn.n_in:
        raise ValueError(f"region dimension {region.dim} != network input {nn.n_in}")
    lo, hi = region.lower.copy(), region.upper.copy()
    pl, pu, ql, qu = [], [], [], []
    for W, b in zip(nn.weights[:-1], nn.biases[:-1]):
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        vl = Wp @ lo + Wn @ hi + b
        vu = Wp @ hi + Wn @ lo + b
        lo, hi = activate(nn.activation, vl), activate(nn.activation, vu)
        pl.append(vl)
        pu.append(vu)
        ql.append(lo)
        qu.append(hi)
    W, b = nn.weights[-1], nn.biases[-1]
    Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
    return IbpBounds(pl, pu, ql, qu, Wp @ lo + Wn @ hi + b, Wp @ hi + Wn @ lo + b)


@dataclass
class EquilibriumCheck:
    passed: bool
    residual: float
    u0: np.ndarray


def check_equilibrium(nn: NeuralNetwork, dynamics, tol: float = 1e-8, states=None, inputs=None,
                      fixed: dict | None = None) -> EquilibriumCheck:
    """Evaluate ||f(0, pi(0))||_inf.

    ``dynamics`` is either a callable ``f(z, u) -> ndarray`` on the true plant or
    a sequence of polynomials; the latter needs the ``states`` and ``inputs``
    names, and any other variable is taken from ``fixed`` (default 0).
    """
    z0 = np.zeros(nn.n_in)
    u0 = nn.forward(z0)
    if callable(dynamics):
        vals = dynamics(z0, u0)
    else:
        if states is None or inputs is None:
            raise ValueError("polynomial dynamics need the state and input names")
        point = {s: 0.0 for s in states}
        point.update({u: float(v) for u, v in zip(inputs, u0)})
        vals = []
        for f in dynamics:
            pt = {f.space.names[i]: 0.0 for i in f.variables()}
            pt.update({k: v for k, v in (fixed or {}).items() if k in pt})
            pt.update({k: v for k, v in point.items() if k in pt})
            vals.append(f(pt))
    r = float(np.max(np.abs(np.asarray(vals, dtype=float)), initial=0.0))
    return EquilibriumCheck(bool(r <= tol), r, u0)
