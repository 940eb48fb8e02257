"""SDPA sparse format (``.dat-s``) export and SDPA-style solution files.

An :class:`~nflsos.sdpsolver.SdpProblem` ``max c.x s.t. Ax = b`` is the SDPA
dual problem ``max <F0, Y> s.t. <F_i, Y> = c_i, Y PSD``: the PSD blocks become
``Y``, each equality row ``i`` becomes ``F_i`` with right-hand side ``c_i = b_i``,
and ``F0`` carries the objective. Free variables are split as ``u = u+ - u-``
into one trailing diagonal (LP) block.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import sdpsolver
from .sdpsolver import ConicSolution, SdpProblem, svec_len, triu_indices

# SDPA phase strings -> status of the problem in our (maximisation) convention
_PHASES = {
    "pdOPT": sdpsolver.OPTIMAL,
    "pdFEAS": sdpsolver.FEASIBLE,
    "dFEAS": sdpsolver.FEASIBLE,
    "dINF": sdpsolver.PRIMAL_INFEASIBLE,
    "dINF_pUNBD": sdpsolver.PRIMAL_INFEASIBLE,
    "pINF": sdpsolver.DUAL_INFEASIBLE,
    "pINF_dUNBD": sdpsolver.DUAL_INFEASIBLE,
    "pdINF": sdpsolver.PRIMAL_INFEASIBLE,
    "pFEAS": sdpsolver.STALLED,
    "noINFO": sdpsolver.STALLED,
    "pUNBD": sdpsolver.PRIMAL_INFEASIBLE,
    "dUNBD": sdpsolver.DUAL_INFEASIBLE,
}
_STATUS_PHASE = {
    sdpsolver.OPTIMAL: "pdOPT",
    sdpsolver.FEASIBLE: "dFEAS",
    sdpsolver.PRIMAL_INFEASIBLE: "dINF",
    sdpsolver.DUAL_INFEASIBLE: "pINF",
    sdpsolver.STALLED: "noINFO",
}


def _fmt(v: float) -> str:
    return repr(float(v))


def _sdpa_blocks(problem: SdpProblem) -> list:
    sizes = list(problem.block_sizes)
    if problem.n_free:
        sizes.append(-2 * problem.n_free)
    return sizes


def _entries(problem: SdpProblem):
    """Yield (matrix index, block, i, j, value) with 1-based indices and i <= j."""
    off = problem.block_offsets()
    nblk = len(problem.block_sizes)
    loc = []
    for k, n in enumerate(problem.block_sizes):
        iu, ju = triu_indices(n)
        loc.extend((k + 1, int(i) + 1, int(j) + 1) for i, j in zip(iu, ju))
    A = problem.A.tocoo()
    for v, r, c in zip(A.data, A.row, A.col):
        if c < off[-1]:
            blk, i, j = loc[c]
            yield int(r) + 1, blk, i, j, v if i == j else 0.5 * v
        else:
            f = int(c - off[-1])
            yield int(r) + 1, nblk + 1, f + 1, f + 1, v
            yield int(r) + 1, nblk + 1, problem.n_free + f + 1, problem.n_free + f + 1, -v
    for c in np.nonzero(problem.c)[0]:
        v = problem.c[c]
        if c < off[-1]:
            blk, i, j = loc[c]
            yield 0, blk, i, j, v if i == j else 0.5 * v
        else:
            f = int(c - off[-1])
            yield 0, nblk + 1, f + 1, f + 1, v
            yield 0, nblk + 1, problem.n_free + f + 1, problem.n_free + f + 1, -v


def write_dats(problem: SdpProblem, path, title: str = "", comments=()) -> None:
    sizes = _sdpa_blocks(problem)
    lines = [f'"{title}"' if title else '"nflsos export"']
    lines += [f"* {c}" for c in comments]
    lines += [f"{problem.n_rows} = mDIM", f"{len(sizes)} = nBLOCK",
              " ".join(str(s) for s in sizes) + " = bLOCKsTRUCT",
              "{" + ", ".join(_fmt(v) for v in problem.b) + "}"]
    merged: dict = {}
    for key in _entries(problem):
        merged[key[:4]] = merged.get(key[:4], 0.0) + key[4]
    for (mat, blk, i, j), v in sorted(merged.items()):
        if v != 0.0:
            lines.append(f"{mat} {blk} {i} {j} {_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


class SdpaFormatError(ValueError):
    pass


def read_dats(path) -> SdpProblem:
    """Read a ``.dat-s`` file. Diagonal blocks are read back as PSD blocks of
    their diagonal only, which is exact for the split free-variable block."""
    text = Path(path).read_text()
    body = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith(("*", '"'))]
    nums = re.split(r"[\s,{}()]+", " ".join(body))
    toks = [t for t in nums if t and not t.startswith("=") and t not in ("mDIM", "nBLOCK", "bLOCKsTRUCT")]
    try:
        m = int(toks[0])
        nb = int(toks[1])
        struct = [int(t) for t in toks[2:2 + nb]]
        b = np.array([float(t) for t in toks[2 + nb:2 + nb + m]])
        rest = toks[2 + nb + m:]
        if m < 0 or nb < 1 or len(struct) != nb or len(b) != m or 0 in struct:
            raise ValueError("truncated or inconsistent counts")
    except (IndexError, ValueError) as exc:
        raise SdpaFormatError(f"{path}: malformed header ({exc})") from exc
    if len(rest) % 5:
        raise SdpaFormatError(f"{path}: entry list is not a multiple of 5 fields")
    sizes = [abs(s) for s in struct]
    offs = np.cumsum([0] + [svec_len(n) for n in sizes])
    rows, cols, vals = [], [], []
    c = np.zeros(offs[-1])
    for q in range(0, len(rest), 5):
        try:
            mat, blk, i, j = (int(t) for t in rest[q:q + 4])
            v = float(rest[q + 4])
        except ValueError as exc:
            raise SdpaFormatError(f"{path}: bad entry ({exc})") from exc
        if not (0 <= mat <= m and 1 <= blk <= nb and 1 <= min(i, j) and max(i, j) <= sizes[blk - 1]):
            raise SdpaFormatError(f"{path}: entry {mat} {blk} {i} {j} out of range")
        i, j = min(i, j) - 1, max(i, j) - 1
        n = sizes[blk - 1]
        col = offs[blk - 1] + i * n - i * (i - 1) // 2 + (j - i)
        coef = v if i == j else 2.0 * v
        if mat == 0:
            c[col] += coef
        else:
            rows.append(mat - 1)
            cols.append(col)
            vals.append(coef)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, offs[-1]))
    return SdpProblem(sizes, 0, A, b, c)


# --------------------------------------------------------------------------
# solution files


def _mat_text(M: np.ndarray, diagonal: bool) -> str:
    if diagonal:
        return "{" + ", ".join(_fmt(v) for v in np.diag(M)) + "}"
    return "{ " + ", ".join("{" + ", ".join(_fmt(v) for v in row) + "}" for row in M) + " }"


def _split_free(problem: SdpProblem, u: np.ndarray) -> np.ndarray:
    return np.diag(np.concatenate([np.maximum(u, 0.0), np.maximum(-u, 0.0)]))


def write_solution(problem: SdpProblem, sol: ConicSolution, path) -> None:
    """Write a solution in SDPA output layout (xVec = row multipliers, xMat = dual
    slacks, yMat = primal blocks)."""
    phase = _STATUS_PHASE.get(sol.status, "noINFO")
    lines = [f"phase.value = {phase}",
             f"objValPrimal = {_fmt(sol.dual_objective)}",
             f"objValDual   = {_fmt(sol.primal_objective)}",
             f"iteration = {sol.iterations}"]
    if sol.x is not None:
        blocks, u = problem.split(sol.x)
        y = sol.y if sol.y is not None else np.zeros(problem.n_rows)
        slacks = list(sol.dual_slacks) or [np.zeros_like(B) for B in blocks]
        free_slack = []
        if problem.n_free:
            blocks = blocks + [_split_free(problem, u)]
            free_slack = [np.zeros((2 * problem.n_free, 2 * problem.n_free))]
        lines += ["xVec = ", "{" + ", ".join(_fmt(v) for v in y) + "}", "xMat = ", "{"]
        diag = [False] * len(problem.block_sizes) + [True] * bool(problem.n_free)
        lines += [_mat_text(M, d) for M, d in zip(list(slacks) + free_slack, diag)]
        lines += ["}", "yMat = ", "{"]
        lines += [_mat_text(M, d) for M, d in zip(blocks, diag)]
        lines += ["}"]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_nested(text: str):
    """Parse brace-nested number lists into Python lists."""
    tokens = re.findall(r"[{}]|[-+0-9.eEinfa]+", text)
    stack = [[]]
    for t in tokens:
        if t == "{":
            stack.append([])
        elif t == "}":
            if len(stack) < 2:
                raise SdpaFormatError("unbalanced braces")
            done = stack.pop()
            stack[-1].append(done)
        else:
            stack[-1].append(float(t))
    if len(stack) != 1:
        raise SdpaFormatError("unbalanced braces")
    return stack[0]


def _section(text: str, key: str, following: tuple) -> str | None:
    i = text.find(key)
    if i < 0:
        return None
    j = len(text)
    for f in following:
        k = text.find(f, i + len(key))
        if k >= 0:
            j = min(j, k)
    return text[i + len(key):j].lstrip(" =")


def read_solution(problem: SdpProblem, path) -> ConicSolution:
    """Import an SDPA output file for ``problem`` as a ConicSolution."""
    text = Path(path).read_text()
    m = re.search(r"phase\.value\s*=\s*(\w+)", text)
    if not m:
        raise SdpaFormatError(f"{path}: no phase.value line")
    status = _PHASES.get(m.group(1), sdpsolver.STALLED)

    def num(key):
        mm = re.search(key + r"\s*=\s*([-+0-9.eE]+|[-+]?inf|nan)", text)
        return float(mm.group(1)) if mm else float("nan")
    p_sdpa, d_sdpa = num("objValPrimal"), num("objValDual")
    iters = num(r"iteration")
    ymat = _section(text, "yMat", ("xVec", "xMat"))
    x = y = None
    blocks: list = []
    free = None
    if ymat is not None:
        mats = _parse_nested(ymat)
        if len(mats) == 1 and isinstance(mats[0], list) and mats[0] and all(isinstance(e, list) for e in mats[0]):
            mats = mats[0]
        expect = len(problem.block_sizes) + bool(problem.n_free)
        if len(mats) != expect:
            raise SdpaFormatError(f"{path}: yMat has {len(mats)} blocks, expected {expect}")
        for n, M in zip(problem.block_sizes, mats):
            B = np.array(M, dtype=float)
            if B.shape != (n, n):
                raise SdpaFormatError(f"{path}: block of shape {B.shape}, expected {(n, n)}")
            blocks.append(0.5 * (B + B.T))
        free = np.zeros(problem.n_free)
        if problem.n_free:
            dvec = np.array(mats[-1], dtype=float)
            if dvec.ndim == 2:
                dvec = np.diag(dvec)
            free = dvec[:problem.n_free] - dvec[problem.n_free:]
        x = problem.join(blocks, free)
    xvec = _section(text, "xVec", ("xMat", "yMat"))
    if xvec is not None:
        vals = _parse_nested(xvec)
        while len(vals) == 1 and isinstance(vals[0], list):
            vals = vals[0]
        y = np.array(vals, dtype=float)
    if x is None and status in (sdpsolver.OPTIMAL, sdpsolver.FEASIBLE):
        status = sdpsolver.STALLED
    pres = dres = gap = float("nan")
    if x is not None:
        pres = float(np.abs(problem.A @ x - problem.b).max(initial=0.0)) / (1 + np.abs(problem.b).max(initial=0.0))
    if np.isfinite(p_sdpa) and np.isfinite(d_sdpa):
        gap = abs(p_sdpa - d_sdpa) / (1 + abs(p_sdpa) + abs(d_sdpa))
    return ConicSolution(status, x, y, blocks, free, [], d_sdpa, p_sdpa,
                         int(iters) if np.isfinite(iters) else 0, pres, dres, gap,
                         message=f"imported SDPA solution ({m.group(1)})")
