"""Certificate files: JSON serialisation and solver-free re-verification.

A certificate stores V, every multiplier with the constraint it weights, the
polynomial dynamics the program used and each Gram matrix with its monomial
basis, so the SOS identities can be re-checked without solving anything. The
payload is deterministic (sorted keys, no timestamps); ``content_sha256``
hashes it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .nnmodel import Box
from .polyalg import Polynomial, VariableSpace, mono_key, mono_mul, mono_str
from .simulator import SampleReport, sample_certificate

FORMAT = "nflsos-certificate"


class CertificateFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# encoding helpers


def _mono_to_json(m) -> list:
    return [[int(i), int(e)] for i, e in m]


def _mono_from_json(m) -> tuple:
    return tuple((int(i), int(e)) for i, e in m)


def poly_to_json(p: Polynomial) -> list:
    return [[_mono_to_json(m), float(c)] for m, c in sorted(p.terms.items(), key=lambda t: mono_key(t[0]))]


def poly_from_json(data, space: VariableSpace) -> Polynomial:
    return Polynomial(space, {_mono_from_json(m): float(c) for m, c in data})


def gram_to_json(basis, Q: np.ndarray) -> dict:
    return {"basis": [_mono_to_json(m) for m in basis], "matrix": [[float(v) for v in row] for row in Q]}


def gram_poly(space: VariableSpace, basis, Q) -> Polynomial:
    terms: dict = {}
    for i, a in enumerate(basis):
        for j, b in enumerate(basis):
            m = mono_mul(a, b)
            terms[m] = terms.get(m, 0.0) + float(Q[i][j])
    return Polynomial(space, terms)


def _sample_dict(rep: SampleReport | None) -> dict | None:
    if rep is None:
        return None
    return {"n": rep.n, "positivity_violations": rep.positivity_violations,
            "decrease_violations": rep.decrease_violations,
            "worst_positivity_margin": rep.worst_positivity_margin,
            "worst_decrease_margin": rep.worst_decrease_margin}


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, NaN to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def content_hash(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "content_sha256"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# building a certificate document


def certificate_document(spec, result) -> dict:
    """Serialisable certificate for a feasible StabilityResult."""
    if result.certificate is None or result.V is None:
        raise ValueError("only feasible results carry a certificate")
    space = spec.space
    cert = result.certificate
    S = result.abstraction
    pools = {"ineq": S.inequalities, "eq": S.equalities, "region": S.region}
    multipliers = []
    for name, kind, idx in result.multipliers:
        c = pools[kind][idx]
        multipliers.append({"name": name, "kind": kind, "tag": c.tag, "label": c.label,
                            "constraint": poly_to_json(c.poly), "poly": poly_to_json(cert.polynomials[name])})
    grams = {name: gram_to_json(basis, Q) for name, (basis, Q) in sorted(cert.gram_matrices.items())}
    diag = dict(cert.diagnostics)
    doc = {
        "format": FORMAT,
        "version": __version__,
        "system": spec.name,
        "kind": result.kind,
        "status": result.status,
        "inputs": dict(sorted(spec.hashes.items())),
        "variables": list(space.names),
        "states": list(spec.states),
        "params": list(spec.params),
        "robustness": ({"param": spec.robustness.param, "interval": [spec.robustness.lower, spec.robustness.upper]}
                       if spec.robustness else None),
        "degrees": spec.degrees.to_dict(),
        "options": spec.options.to_dict(),
        "region": result.final_region.to_list() if result.final_region is not None else None,
        "region_polynomials": [poly_to_json(d) for d in spec.region_polys],
        "shrink_iterations": result.shrink_iterations,
        "iterations": [{k: v for k, v in h.items() if k != "seconds"} for h in result.iterations_log],
        "lyapunov": {"V": poly_to_json(result.V), "epsilon": spec.options.epsilon,
                     "decrease_margin": spec.options.margin},
        "dynamics": [poly_to_json(f) for f in result.dynamics],
        "multipliers": multipliers,
        "gram": grams,
        "notes": list(S.notes),
        "diagnostics": {k: diag[k] for k in sorted(diag)},
        "soundness": _sample_dict(result.soundness),
    }
    doc["roa"] = roa_section(spec, result)
    doc = _clean(doc)
    doc["content_sha256"] = content_hash(doc)
    return doc


def roa_section(spec, result) -> dict | None:
    if result.roa_certificate is None:
        return None
    from .system import region_faces
    rc = result.roa_certificate
    faces = [{"d": poly_to_json(d), "p": poly_to_json(rc.polynomials[f"p{i}"])}
             for i, d in enumerate(region_faces(spec, result.final_region))]
    return _clean({
        "gamma": result.gamma,
        "k": result.roa_k,
        "faces": faces,
        "gram": {name: gram_to_json(b, Q) for name, (b, Q) in sorted(rc.gram_matrices.items())},
        "diagnostics": {k: rc.diagnostics[k] for k in sorted(rc.diagnostics)},
    })


def with_roa(doc: dict, spec, result) -> dict:
    """Copy of ``doc`` carrying the ROA data of ``result``, re-hashed."""
    out = {k: v for k, v in doc.items() if k != "content_sha256"}
    out["roa"] = roa_section(spec, result)
    out["content_sha256"] = content_hash(out)
    return out


def result_from_document(doc: dict, spec):
    """StabilityResult holding the stored V and region, enough to run the ROA step."""
    from .certifier import FEASIBLE, StabilityResult
    src = VariableSpace(doc["variables"])
    V = poly_from_json(doc["lyapunov"]["V"], src)
    # network node variables live only in the program; V itself must not need them
    missing = {src.names[i] for i in V.variables()} - set(spec.space.names)
    if missing:
        raise CertificateFormatError(f"V uses variables {sorted(missing)} that are not in the definition")
    V = Polynomial(spec.space, {mono_from_names(m, src, spec.space): c for m, c in V.terms.items()})
    region = Box(*zip(*doc["region"])) if doc["region"] is not None else None
    return StabilityResult(FEASIBLE, doc["kind"], V=V, final_region=region)


def write_certificate(path, doc: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_certificate(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CertificateFormatError(f"{path}: not JSON ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise CertificateFormatError(f"{path}: not a certificate file")
    return doc


# --------------------------------------------------------------------------
# verification


@dataclass
class VerifyReport:
    hash_ok: bool
    identity_residuals: dict
    min_eigenvalues: dict
    problems: list = field(default_factory=list)
    sampling: SampleReport | None = None

    @property
    def ok(self) -> bool:
        return not self.problems


def _faces(region: list, space: VariableSpace, states: list) -> list:
    out = []
    for name, (lo, hi) in zip(states, region):
        z = space.var(name)
        out += [z - float(lo), float(hi) - z]
    return out


def verify_certificate(doc: dict, spec=None, samples: int = 0, psd_tol: float | None = None,
                       recon_tol: float | None = None, seed: int = 0) -> VerifyReport:
    """Re-check every stored SOS identity; with ``spec``, also sample the true
    closed loop and compare the input hashes."""
    opts = doc["options"]
    psd_tol = opts["psd_tol"] if psd_tol is None else psd_tol
    recon_tol = opts["recon_tol"] if recon_tol is None else recon_tol
    space = VariableSpace(doc["variables"])
    problems = []
    hash_ok = content_hash(doc) == doc.get("content_sha256")
    if not hash_ok:
        problems.append("content hash mismatch")
    grams = {k: ([_mono_from_json(m) for m in g["basis"]], np.array(g["matrix"], dtype=float).reshape(
        len(g["basis"]), len(g["basis"]))) for k, g in doc["gram"].items()}
    eigs, res = {}, {}

    def check(name: str, expr: Polynomial, gram_name: str, table: dict):
        if gram_name not in table:
            problems.append(f"missing Gram matrix {gram_name}")
            return
        basis, Q = table[gram_name]
        e = float(np.linalg.eigvalsh(0.5 * (Q + Q.T))[0]) if len(basis) else 0.0
        eigs[gram_name] = e
        if e < -psd_tol:
            problems.append(f"Gram {gram_name} has eigenvalue {e:.3e} below -{psd_tol:g}")
        r = (expr - gram_poly(space, basis, Q)).max_abs_coef()
        res[name] = r
        if r > recon_tol:
            problems.append(f"identity {name} residual {r:.3e} exceeds {recon_tol:g}")

    states = doc["states"]
    zs = [space.var(s) for s in states]
    r2 = sum((z * z for z in zs), space.zero())
    V = poly_from_json(doc["lyapunov"]["V"], space)
    eps = doc["lyapunov"]["epsilon"]
    check("V", V - eps * r2, "V", grams)
    dyn = [poly_from_json(f, space) for f in doc["dynamics"]]
    E = -doc["lyapunov"]["decrease_margin"] * r2
    for s, f in zip(states, dyn):
        E = E - V.diff(s) * f
    for m in doc["multipliers"]:
        mult = poly_from_json(m["poly"], space)
        E = E - mult * poly_from_json(m["constraint"], space)
        if m["kind"] != "eq":
            check(m["name"], mult, m["name"], grams)
    check("lyapunov", E, "lyapunov", grams)
    roa = doc.get("roa")
    if roa is not None:
        expected = _faces(doc["region"] or [], space, states)
        expected += [poly_from_json(d, space) for d in doc.get("region_polynomials", [])]
        if not expected:
            problems.append("ROA data without a region")
        else:
            rg = {k: ([_mono_from_json(m) for m in g["basis"]], np.array(g["matrix"], dtype=float).reshape(
                len(g["basis"]), len(g["basis"]))) for k, g in roa["gram"].items()}
            r2k = r2 ** int(roa["k"])
            stored = [poly_from_json(fd["d"], space) for fd in roa["faces"]]
            if len(stored) != len(expected) or any(not a.almost_equal(b, 1e-12) for a, b in zip(expected, stored)):
                problems.append("ROA faces do not match the certified region")
            for i, (d, fd) in enumerate(zip(stored, roa["faces"])):
                p = poly_from_json(fd["p"], space)
                check(f"p{i}", p, f"p{i}", rg)
                check(f"roa{i}", r2k * V - float(roa["gamma"]) * r2k + p * d, f"roa{i}", rg)
            if not roa["gamma"] > 0:
                problems.append(f"ROA level {roa['gamma']} is not positive")
    rep = VerifyReport(hash_ok, res, eigs, problems)
    if spec is not None:
        for key, h in doc.get("inputs", {}).items():
            if spec.hashes.get(key) not in (None, h):
                problems.append(f"input {key} hash differs from the certified one")
        if samples > 0:
            from .certifier import sample_region, sampling_box
            from .system import ClosedLoop
            region = Box(*zip(*doc["region"])) if doc["region"] is not None else None
            box = sampling_box(spec, region)
            rng = np.random.default_rng(seed)
            pts = sample_region(spec, region, samples, rng)
            params = {}
            if spec.robustness is not None:
                rb = spec.robustness
                params[rb.param] = rng.uniform(rb.lower, rb.upper, size=len(pts))
            Vs = Polynomial(spec.space, {mono_from_names(m, space, spec.space): c for m, c in V.terms.items()})
            srep = sample_certificate(Vs, spec.states, ClosedLoop(spec, params), box, samples, eps, rng,
                                      points=pts)
            rep.sampling = srep
            if not srep.ok:
                problems.append(f"sampling found {srep.positivity_violations} positivity and "
                                f"{srep.decrease_violations} decrease violations")
    return rep


def mono_from_names(m, src: VariableSpace, dst: VariableSpace) -> tuple:
    return tuple(sorted((dst.index(src.names[i]), e) for i, e in m))


def describe_poly(data, names: list) -> str:
    return " + ".join(f"{c!r}*{mono_str(_mono_from_json(m), names)}" for m, c in data) or "0"
