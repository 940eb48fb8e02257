"""Dense primal-dual interior-point solver for block SDPs with free variables.

Problem (maximisation convention)::

    maximize    c^T x
    subject to  A x = b
                x = (svec(X_1), ..., svec(X_K), u),  X_k PSD,  u free

``svec`` lists the upper triangle row by row *without* scaling: the column for
entry (i, j), i < j, multiplies X_ij once. The solver works on the homogeneous
self-dual embedding of the equivalent minimisation, uses the HKM search
direction with a Mehrotra predictor-corrector, and factors the Schur
complement densely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
FEASIBLE = "feasible"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"
STALLED = "stalled"


def svec_len(n: int) -> int:
    return n * (n + 1) // 2


def triu_indices(n: int):
    return np.triu_indices(n)


def svec_to_sym(v: np.ndarray, n: int) -> np.ndarray:
    """Entries are the matrix values X_ij (i <= j)."""
    X = np.zeros((n, n))
    iu = triu_indices(n)
    X[iu] = v
    X[(iu[1], iu[0])] = v
    return X


def sym_to_svec(X: np.ndarray) -> np.ndarray:
    return X[triu_indices(X.shape[0])].copy()


def coef_to_sym(g: np.ndarray, n: int) -> np.ndarray:
    """Coefficient vector in svec coordinates -> symmetric matrix G with <G, X> = g . svec(X)."""
    G = svec_to_sym(g, n) * 0.5
    G[np.diag_indices(n)] *= 2.0
    return G


def sym_to_coef(G: np.ndarray) -> np.ndarray:
    n = G.shape[0]
    g = 2.0 * G[triu_indices(n)]
    d = np.cumsum(np.r_[0, np.arange(n, 1, -1)])  # positions of diagonal entries in svec
    g[d] *= 0.5
    return g


@dataclass
class SdpProblem:
    block_sizes: list
    n_free: int
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    row_labels: list = field(default_factory=list)
    block_labels: list = field(default_factory=list)
    free_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.A.shape != (len(self.b), self.n_vars):
            raise ValueError(f"A has shape {self.A.shape}, expected ({len(self.b)}, {self.n_vars})")
        if self.c.shape != (self.n_vars,):
            raise ValueError("objective length mismatch")

    @property
    def n_vars(self) -> int:
        return sum(svec_len(n) for n in self.block_sizes) + self.n_free

    @property
    def n_rows(self) -> int:
        return len(self.b)

    def block_offsets(self) -> list:
        off = [0]
        for n in self.block_sizes:
            off.append(off[-1] + svec_len(n))
        return off

    def split(self, x: np.ndarray):
        """Split a variable vector into (list of symmetric blocks, free vector)."""
        off = self.block_offsets()
        blocks = [svec_to_sym(x[off[k]:off[k + 1]], n) for k, n in enumerate(self.block_sizes)]
        return blocks, x[off[-1]:]

    def join(self, blocks, u) -> np.ndarray:
        return np.concatenate([sym_to_svec(X) for X in blocks] + [np.asarray(u, dtype=float)])


@dataclass
class SolverOptions:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    infeas_tol: float = 1e-8
    max_iters: int = 200
    step_fraction: float = 0.95
    debug: bool = False
    verbose: bool = False


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray | None
    y: np.ndarray | None
    blocks: list
    free: np.ndarray | None
    dual_slacks: list
    primal_objective: float
    dual_objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    gap: float
    certificate: np.ndarray | None = None
    history: list = field(default_factory=list)
    message: str = ""


# --------------------------------------------------------------------------


class _Block:
    """Constraint data of one PSD block in full-vec form for Schur assembly."""

    def __init__(self, A_block: sp.csc_matrix, n: int):
        self.n = n
        self.Acols = A_block  # m x svec_len(n), csc
        touched = np.unique(A_block.tocoo().row)
        self.rows = touched
        # P: n^2 x t, column r = vec(sym matrix of row touched[r])
        At = A_block[touched, :].tocoo()  # t x s
        iu, ju = triu_indices(n)
        ii, jj = iu[At.col], ju[At.col]
        val = At.data
        off = ii != jj
        r = np.concatenate([At.row, At.row[off]])
        pos = np.concatenate([ii * n + jj, jj[off] * n + ii[off]])
        vv = np.concatenate([np.where(off, val * 0.5, val), val[off] * 0.5])
        self.P = sp.csr_matrix((vv, (pos, r)), shape=(n * n, len(touched)))
        self.PT = self.P.T.tocsr()
        self._chunks = None

    def schur(self, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """M_rs = tr(A_r X A_s Z) restricted to touched rows."""
        n, t = self.n, len(self.rows)
        if t == 0:
            return np.zeros((0, 0))
        if n * n <= 4096:
            K = np.kron(X, Z)
            return self.PT @ (self.PT @ K.T).T
        M = np.zeros((t, t))
        chunk = max(1, int(2.0e7 // (n ** 3)))
        if self._chunks is None or self._chunks[0] != chunk:
            self._chunks = (chunk, [self.PT[:, p0 * n:min(n, p0 + chunk) * n] for p0 in range(0, n, chunk)])
        for c, p0 in enumerate(range(0, n, chunk)):
            p1 = min(n, p0 + chunk)
            # columns p0*n..p1*n of kron(X, Z); X and Z are symmetric so no transpose is needed
            Kt = (X[:, None, p0:p1, None] * Z[None, :, None, :]).reshape(n * n, (p1 - p0) * n)
            Y = self.PT @ Kt
            M += self._chunks[1][c] @ Y.T
        return M


def _max_step(X: np.ndarray, dX: np.ndarray) -> float:
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return 0.0
    Li = sla.solve_triangular(L, dX, lower=True)
    T = sla.solve_triangular(L, Li.T, lower=True)
    lam = np.linalg.eigvalsh(0.5 * (T + T.T))[0]
    return np.inf if lam >= 0 else -1.0 / lam


def _sym(M):
    return 0.5 * (M + M.T)


def solve(problem: SdpProblem, opts: SolverOptions | None = None) -> ConicSolution:
    opts = opts or SolverOptions()
    m = problem.n_rows
    sizes = list(problem.block_sizes)
    off = problem.block_offsets()
    A = problem.A.tocsc()
    Bf = A[:, off[-1]:].toarray() if problem.n_free else np.zeros((m, 0))
    b = problem.b.copy()
    # minimisation data
    Cm = [coef_to_sym(-problem.c[off[k]:off[k + 1]], n) for k, n in enumerate(sizes)]
    d = -problem.c[off[-1]:]
    blocks = [_Block(A[:, off[k]:off[k + 1]], n) for k, n in enumerate(sizes)]
    Ablk = [A[:, off[k]:off[k + 1]].tocsr() for k in range(len(sizes))]
    ATblk = [Ab.T.tocsr() for Ab in Ablk]

    def opA(Xs):
        out = np.zeros(m)
        for k, X in enumerate(Xs):
            out += Ablk[k] @ sym_to_svec(X)
        return out

    def opAT(y):
        return [coef_to_sym(ATblk[k] @ y, n) for k, n in enumerate(sizes)]

    nu = sum(sizes) + 1
    X = [np.eye(n) for n in sizes]
    S = [np.eye(n) for n in sizes]
    y = np.zeros(m)
    u = np.zeros(problem.n_free)
    tau, kappa = 1.0, 1.0
    nb = 1.0 + np.linalg.norm(b, np.inf)
    nc = 1.0 + max([np.abs(C).max(initial=0.0) for C in Cm] + [np.abs(d).max(initial=0.0)])

    history = []
    status, msg = STALLED, "iteration limit"
    certificate = None
    it = 0
    small_steps = 0
    best_pres, flat = np.inf, 0
    for it in range(opts.max_iters + 1):
        AX = opA(X)
        ATy = opAT(y)
        rp = AX + Bf @ u - b * tau
        rd = [-ATy[k] - S[k] + Cm[k] * tau for k in range(len(sizes))]
        ru = -Bf.T @ y + d * tau
        cx = sum(float(np.vdot(Cm[k], X[k])) for k in range(len(sizes))) + float(d @ u)
        by = float(b @ y)
        rg = by - cx - kappa
        xs = sum(float(np.vdot(X[k], S[k])) for k in range(len(sizes)))
        mu = (xs + tau * kappa) / nu

        pres = np.linalg.norm(rp, np.inf) / tau / nb
        dres = max([np.abs(r).max(initial=0.0) for r in rd] + [np.abs(ru).max(initial=0.0)]) / tau / nc
        pobj, dobj = cx / tau, by / tau
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        history.append((it, pres, dres, gap, mu, tau, kappa))
        if opts.verbose:
            log.info("it %3d pres %.2e dres %.2e gap %.2e mu %.2e tau %.2e kappa %.2e", it, pres, dres, gap, mu, tau, kappa)
        if opts.debug:
            # tau^2 (pobj - dobj) = <S, X> + <rd, X> + u.ru + y.rp on homogenised iterates
            slack = (abs(float(y @ rp)) + abs(float(u @ ru))
                     + sum(abs(float(np.vdot(X[k], rd[k]))) for k in range(len(sizes)))) / tau ** 2
            assert pobj - dobj >= -slack - 1e-9 * (1 + abs(pobj) + abs(dobj)), "weak duality violated"

        if pres <= opts.feas_tol and dres <= opts.feas_tol and gap <= opts.gap_tol:
            status, msg = OPTIMAL, "converged"
            break
        # infeasibility certificates (normalised rays)
        if by > 0:
            ray_res = max([np.abs(Cm[k] * tau - rd[k]).max(initial=0.0) for k in range(len(sizes))]
                          + [np.abs(d * tau - ru).max(initial=0.0)]) / by
            if ray_res <= opts.infeas_tol and tau < kappa:
                status, msg = PRIMAL_INFEASIBLE, "Farkas ray found"
                certificate = y / by
                break
        if cx < 0:
            ray_res = np.linalg.norm(rp + b * tau, np.inf) / (-cx)
            if ray_res <= opts.infeas_tol and tau < kappa:
                status, msg = DUAL_INFEASIBLE, "improving primal ray found"
                certificate = problem.join(X, u) / (-cx)
                break
        if pres < 0.99 * best_pres:
            best_pres, flat = pres, 0
        else:
            flat += 1
        if flat >= 15 and max(dres, gap) <= opts.feas_tol:
            msg = "primal residual stagnated"
            break
        if it == opts.max_iters:
            break

        # ---- factorisation
        try:
            Z = []
            for Sk in S:
                Ls = np.linalg.cholesky(Sk)
                Li = sla.solve_triangular(Ls, np.eye(len(Sk)), lower=True)
                Z.append(Li.T @ Li)
        except np.linalg.LinAlgError:
            msg = "dual slack lost definiteness"
            break
        M = np.zeros((m, m))
        for k, blk in enumerate(blocks):
            if len(blk.rows):
                Mk = blk.schur(X[k], Z[k])
                M[np.ix_(blk.rows, blk.rows)] += Mk
        M = _sym(M)
        diagM = np.diag(M).copy()
        reg = 1e-14 * max(1.0, diagM.max(initial=1.0))
        M[np.diag_indices(m)] += reg + (diagM == 0) * 1.0 * (diagM.max(initial=1.0) * 1e-8 + 1e-12)
        try:
            LM = sla.cho_factor(M, lower=True, check_finite=False)
        except sla.LinAlgError:
            try:
                M[np.diag_indices(m)] += 1e-8 * max(1.0, diagM.max(initial=1.0))
                LM = sla.cho_factor(M, lower=True, check_finite=False)
            except sla.LinAlgError:
                msg = "Schur complement factorisation failed"
                break
        if problem.n_free:
            MiB = sla.cho_solve(LM, Bf, check_finite=False)
            SB = _sym(Bf.T @ MiB)
            SB[np.diag_indices(len(SB))] += 1e-12 * max(1.0, np.abs(np.diag(SB)).max(initial=1.0))
            try:
                LSB = sla.cho_factor(SB, lower=True, check_finite=False)
            except sla.LinAlgError:
                SB[np.diag_indices(len(SB))] += 1e-8 * max(1.0, np.abs(np.diag(SB)).max(initial=1.0))
                LSB = sla.cho_factor(SB, lower=True, check_finite=False)

        def ksolve(r1, r2):
            p = sla.cho_solve(LM, r1, check_finite=False)
            if not problem.n_free:
                return p, np.zeros(0)
            q = sla.cho_solve(LSB, Bf.T @ p - r2, check_finite=False)
            return p - MiB @ q, q

        def E(k, Mat):
            return _sym(X[k] @ Mat @ Z[k])

        ECs = [E(k, Cm[k]) for k in range(len(sizes))]
        a = opA(ECs)
        cc = sum(float(np.vdot(Cm[k], ECs[k])) for k in range(len(sizes)))
        p2, q2 = ksolve(a + b, d)

        def direction(sigma, eta, corrX=None, corr_tk=0.0):
            Rbar = []
            for k in range(len(sizes)):
                Rc = sigma * mu * Z[k] - X[k]
                if corrX is not None:
                    Rc = Rc - corrX[k]
                Rbar.append(Rc - eta * E(k, rd[k]))
            h1 = -eta * rp - opA(Rbar)
            h4 = -eta * rg + sum(float(np.vdot(Cm[k], Rbar[k])) for k in range(len(sizes))) \
                + (sigma * mu - tau * kappa - corr_tk) / tau
            p1, q1 = ksolve(h1, eta * ru)
            den = float((b - a) @ p2 - d @ q2) + cc + kappa / tau
            dtau = (h4 - float((b - a) @ p1) + float(d @ q1)) / den
            dy = p1 + p2 * dtau
            du = q1 + q2 * dtau
            ATdy = opAT(dy)
            dS = [_sym(eta * rd[k] - ATdy[k] + Cm[k] * dtau) for k in range(len(sizes))]
            dX = [Rbar[k] + E(k, ATdy[k] - Cm[k] * dtau) for k in range(len(sizes))]
            dkap = (sigma * mu - tau * kappa - corr_tk - kappa * dtau) / tau
            return dX, dy, du, dS, dtau, dkap

        def step_len(dX, dS, dtau, dkap):
            amax = np.inf
            for k in range(len(sizes)):
                amax = min(amax, _max_step(X[k], dX[k]), _max_step(S[k], dS[k]))
            if dtau < 0:
                amax = min(amax, -tau / dtau)
            if dkap < 0:
                amax = min(amax, -kappa / dkap)
            return amax

        dX, dy, du, dS, dtau, dkap = direction(0.0, 1.0)
        a_aff = min(1.0, step_len(dX, dS, dtau, dkap))
        mu_aff = (sum(float(np.vdot(X[k] + a_aff * dX[k], S[k] + a_aff * dS[k])) for k in range(len(sizes)))
                  + (tau + a_aff * dtau) * (kappa + a_aff * dkap)) / nu
        sigma = float(np.clip((mu_aff / mu) ** 3, 0.0, 1.0))
        corrX = [_sym(dX[k] @ dS[k] @ Z[k]) for k in range(len(sizes))]
        dX, dy, du, dS, dtau, dkap = direction(sigma, 1.0 - sigma, corrX, dtau * dkap)
        alpha = min(1.0, opts.step_fraction * step_len(dX, dS, dtau, dkap))
        if not np.isfinite(alpha) or alpha <= 0:
            msg = "zero step length"
            break
        small_steps = small_steps + 1 if alpha < 1e-6 else 0
        if small_steps >= 5:
            msg = "step length collapsed"
            break
        X = [X[k] + alpha * dX[k] for k in range(len(sizes))]
        S = [S[k] + alpha * dS[k] for k in range(len(sizes))]
        y = y + alpha * dy
        u = u + alpha * du
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkap
        # rescale homogeneous iterate to keep tau + kappa moderate
        scale = tau + kappa
        if scale > 1e6 or scale < 1e-6:
            X = [Xk / scale for Xk in X]
            S = [Sk / scale for Sk in S]
            y, u, tau, kappa = y / scale, u / scale, tau / scale, kappa / scale

    if status in (OPTIMAL, STALLED):
        xs_blocks = [Xk / tau for Xk in X]
        if status == STALLED and pres <= 10 * opts.feas_tol:
            status = FEASIBLE
            msg = f"primal feasible, not optimal ({msg})"
        sol_x = problem.join(xs_blocks, u / tau)
        return ConicSolution(status, sol_x, -y / tau, xs_blocks, u / tau, [Sk / tau for Sk in S],
                             -pobj, -dobj, it, pres, dres, gap, None, history, msg)
    return ConicSolution(status, None, None, [], None, [], -pobj, -dobj, it, pres, dres, gap,
                         certificate, history, msg)


# --------------------------------------------------------------------------


@dataclass
class ValidationReport:
    status_claimed: str
    primal_residual: float
    dual_residual: float
    gap: float
    min_eig_primal: list
    min_eig_dual: list
    ok: bool
    problems: list


def validate(problem: SdpProblem, sol: ConicSolution, feas_tol: float = 1e-6, psd_tol: float = 1e-8) -> ValidationReport:
    """Recompute residuals and eigenvalue floors from scratch and check the claimed status."""
    issues = []
    off = problem.block_offsets()
    if sol.status in (OPTIMAL, FEASIBLE):
        x = sol.x if sol.x is not None else problem.join(sol.blocks, sol.free)
        r = problem.A @ x - problem.b
        pres = float(np.linalg.norm(r, np.inf) / (1.0 + np.linalg.norm(problem.b, np.inf)))
        blocks, _ = problem.split(x)
        eigs = [float(np.linalg.eigvalsh(Xk)[0]) if len(Xk) else 0.0 for Xk in blocks]
        if pres > feas_tol:
            issues.append(f"primal residual {pres:.3e} exceeds {feas_tol:.1e}")
        for k, e in enumerate(eigs):
            if e < -psd_tol * max(1.0, np.abs(blocks[k]).max(initial=0.0)):
                issues.append(f"block {k} min eigenvalue {e:.3e}")
        dres, gap, deigs = 0.0, 0.0, []
        if sol.status == OPTIMAL and sol.y is not None:
            g = problem.A.T @ sol.y - problem.c
            deigs = [float(np.linalg.eigvalsh(coef_to_sym(g[off[k]:off[k + 1]], n))[0]) if n else 0.0
                     for k, n in enumerate(problem.block_sizes)]
            dres = float(np.abs(g[off[-1]:]).max(initial=0.0)) / (1.0 + np.abs(problem.c).max(initial=0.0))
            dres = max(dres, max([-e for e in deigs] + [0.0]) / (1.0 + np.abs(problem.c).max(initial=0.0)))
            pobj, dobj = float(problem.c @ x), float(problem.b @ sol.y)
            gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
            if dres > feas_tol:
                issues.append(f"dual residual {dres:.3e}")
            if gap > feas_tol:
                issues.append(f"duality gap {gap:.3e}")
        return ValidationReport(sol.status, pres, dres, gap, eigs, deigs, not issues, issues)
    if sol.status == PRIMAL_INFEASIBLE:
        yv = sol.certificate
        if yv is None:
            return ValidationReport(sol.status, np.nan, np.nan, np.nan, [], [], False, ["no certificate"])
        g = problem.A.T @ yv  # need A^T y <= 0 on cones, = 0 on free, b^T y > 0
        by = float(problem.b @ yv)
        eigs = [float(np.linalg.eigvalsh(-coef_to_sym(g[off[k]:off[k + 1]], n))[0]) if n else 0.0
                for k, n in enumerate(problem.block_sizes)]
        free_res = float(np.abs(g[off[-1]:]).max(initial=0.0))
        if by <= 0:
            issues.append("ray has nonpositive b^T y")
        viol = max([-e for e in eigs] + [free_res, 0.0]) / max(by, 1e-300)
        if viol > feas_tol:
            issues.append(f"Farkas ray violation {viol:.3e}")
        return ValidationReport(sol.status, viol, np.nan, np.nan, [], eigs, not issues, issues)
    return ValidationReport(sol.status, np.nan, np.nan, np.nan, [], [], sol.status != STALLED,
                            [] if sol.status != STALLED else ["solver stalled"])
