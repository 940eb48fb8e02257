"""Fixed-step RK4 simulation of the true closed loop, plus sampling oracles."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .nnmodel import Box
from .polyalg import CompiledPolynomial, Polynomial, differentiate

CONVERGED = "converged"
HORIZON = "horizon"
DIVERGED = "diverged"


@dataclass(frozen=True)
class SimConfig:
    step: float = 0.01
    horizon: float = 30.0
    convergence_radius: float = 1e-3
    hold_steps: int = 50
    blowup: float = 1e6

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.horizon < self.step:
            raise ValueError("horizon must be at least one step")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    converged: bool
    exit_reason: str


def rk4_step(f: Callable, Z: np.ndarray, h: float) -> np.ndarray:
    k1 = f(Z)
    k2 = f(Z + 0.5 * h * k1)
    k3 = f(Z + 0.5 * h * k2)
    k4 = f(Z + h * k3)
    return Z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(f: Callable, z0, config: SimConfig = SimConfig()) -> Trajectory:
    """Integrate one initial state. ``f`` maps a (batch, n) array to derivatives."""
    z = np.atleast_2d(np.asarray(z0, dtype=float))
    states = [z[0].copy()]
    hold = 0
    reason = HORIZON
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.n_steps):
            z = rk4_step(f, z, config.step)
            states.append(z[0].copy())
            nrm = np.linalg.norm(z[0])
            if not np.isfinite(nrm) or nrm > config.blowup:
                reason = DIVERGED
                break
            hold = hold + 1 if nrm <= config.convergence_radius else 0
            if hold >= config.hold_steps:
                reason = CONVERGED
                break
    S = np.array(states)
    return Trajectory(config.step * np.arange(len(S)), S, reason == CONVERGED, reason)


@dataclass
class BatchResult:
    initial: np.ndarray
    final: np.ndarray
    converged: np.ndarray
    reasons: list


def integrate_batch(f: Callable, Z0: np.ndarray, config: SimConfig = SimConfig()) -> BatchResult:
    """Vectorised integration of many initial states; each row stops independently."""
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    Z = Z0.copy()
    n = Z.shape[0]
    hold = np.zeros(n, dtype=int)
    status = np.full(n, HORIZON, dtype=object)
    active = np.ones(n, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.n_steps):
            idx = np.nonzero(active)[0]
            if not len(idx):
                break
            Zn = rk4_step(f, Z[idx], config.step)
            Z[idx] = Zn
            nrm = np.linalg.norm(Zn, axis=1)
            bad = ~np.isfinite(nrm) | (nrm > config.blowup)
            hold[idx] = np.where(nrm <= config.convergence_radius, hold[idx] + 1, 0)
            done = hold[idx] >= config.hold_steps
            status[idx[bad]] = DIVERGED
            status[idx[done & ~bad]] = CONVERGED
            active[idx[bad | done]] = False
    return BatchResult(Z0, Z, status == CONVERGED, list(status))


def grid_points(region: Box, per_axis: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(region.lower, region.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def basin_sample(f: Callable, region: Box, grid: int | None = None, count: int | None = None,
                 config: SimConfig = SimConfig(), seed: int = 0) -> BatchResult:
    """Classify initial states on a regular grid (``grid`` points per axis) or ``count`` uniform samples."""
    if (grid is None) == (count is None):
        raise ValueError("give exactly one of grid or count")
    if grid is not None:
        pts = grid_points(region, grid)
    else:
        pts = region.sample(count, np.random.default_rng(seed))
    return integrate_batch(f, pts, config)


# --------------------------------------------------------------------------
# certificate sampling


@dataclass
class SampleReport:
    n: int
    positivity_violations: int
    decrease_violations: int
    worst_positivity_margin: float
    worst_decrease_margin: float
    worst_point: list | None

    @property
    def ok(self) -> bool:
        return self.positivity_violations == 0 and self.decrease_violations == 0


class LyapunovEvaluator:
    """Vectorised V(z) and dV/dz on the true states."""

    def __init__(self, V: Polynomial, states: list):
        space = V.space
        cols = [space.index(s) for s in states]
        self.V = CompiledPolynomial(V, cols)
        self.grad = [CompiledPolynomial(differentiate(V, s), cols) for s in states]

    def value(self, Z: np.ndarray) -> np.ndarray:
        return self.V(Z)

    def derivative(self, Z: np.ndarray, F: np.ndarray) -> np.ndarray:
        return sum(g(Z) * F[:, i] for i, g in enumerate(self.grad))


def sample_certificate(V: Polynomial, states: list, dynamics: Callable, region: Box, n: int,
                       epsilon: float, rng: np.random.Generator, tol: float = 1e-6,
                       points: np.ndarray | None = None) -> SampleReport:
    """Check V(z) >= eps |z|^2 (1 - tol) and dV/dt <= tol (1 + |z|^2) at random points of the region."""
    if points is None:
        points = region.sample(n, rng) if n > 0 else np.zeros((0, len(states)))
    if not len(points):
        return SampleReport(0, 0, 0, 0.0, 0.0, None)
    ev = LyapunovEvaluator(V, states)
    r2 = np.sum(points ** 2, axis=1)
    v = ev.value(points)
    pos_margin = v - epsilon * r2 * (1 - tol)
    vdot = ev.derivative(points, dynamics(points))
    dec_margin = tol * (1 + r2) - vdot
    worst = int(np.argmin(np.minimum(pos_margin, dec_margin)))
    return SampleReport(len(points), int(np.sum(pos_margin < 0)), int(np.sum(dec_margin < 0)),
                        float(pos_margin.min()), float(dec_margin.min()), points[worst].tolist())


def sample_in_level_set(V: Polynomial, states: list, gamma: float, region: Box, n: int,
                        rng: np.random.Generator, max_draws: int = 10_000_000) -> np.ndarray:
    """Rejection-sample ``n`` states from {V <= gamma} within the region box."""
    ev = LyapunovEvaluator(V, states)
    out = []
    drawn = 0
    while sum(len(o) for o in out) < n:
        if drawn > max_draws:
            raise RuntimeError("level set too small relative to the region for rejection sampling")
        batch = region.sample(max(1000, 4 * n), rng)
        drawn += len(batch)
        out.append(batch[ev.value(batch) <= gamma])
    return np.concatenate(out)[:n]


def level_set_boundary(V: Polynomial, states: list, gamma: float, n: int, rng: np.random.Generator,
                       r_max: float = 1e3) -> np.ndarray:
    """Points on {V = gamma} found by bisection along random rays from the origin."""
    ev = LyapunovEvaluator(V, states)
    d = rng.normal(size=(n, len(states)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lo = np.zeros(n)
    hi = np.full(n, r_max)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        inside = ev.value(mid[:, None] * d) <= gamma
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return lo[:, None] * d


# --------------------------------------------------------------------------
# CSV emitters


def _open_csv(path, comments):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    for line in comments:
        fh.write(f"# {line}\n")
    return fh


def write_trajectory_csv(path, traj: Trajectory, states: list, comments: Sequence[str] = ()):
    with _open_csv(path, comments) as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + list(states))
        for t, z in zip(traj.times, traj.states):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in z])


def write_basin_csv(path, result: BatchResult, states: list, comments: Sequence[str] = ()):
    with _open_csv(path, comments) as fh:
        w = csv.writer(fh)
        w.writerow(list(states) + ["converged", "reason"])
        for z, c, r in zip(result.initial, result.converged, result.reasons):
            w.writerow([repr(float(x)) for x in z] + [int(c), r])


def write_points_csv(path, points: np.ndarray, states: list, comments: Sequence[str] = ()):
    with _open_csv(path, comments) as fh:
        w = csv.writer(fh)
        w.writerow(list(states))
        for z in points:
            w.writerow([repr(float(x)) for x in z])
