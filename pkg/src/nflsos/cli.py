"""Command-line entry point.

Exit codes: 0 certified (or the command succeeded), 2 honest infeasibility,
1 any error, including a certificate that fails its own soundness checks.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, certio, sdpa
from .certifier import (FEASIBLE, INFEASIBLE, build_lyapunov_program, certify_global, certify_local,
                        roa_maximize, certify_shrinking, soundness_gate)
from .polyalg import format_polynomial
from .simulator import (SimConfig, basin_sample, integrate, integrate_batch, level_set_boundary,
                        sample_in_level_set, write_basin_csv, write_points_csv, write_trajectory_csv)
from .system import DefinitionError, ProblemSpec, load_definition

log = logging.getLogger("nflsos")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


class CliError(RuntimeError):
    pass


class _ExportOnly(Exception):
    pass


# --------------------------------------------------------------------------
# shared option handling


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("program")
    g.add_argument("--global", dest="global_", action="store_true", help="global analysis, no region")
    g.add_argument("--v-degree", type=int, metavar="N", help="degree of V (even)")
    g.add_argument("--mult-degree", type=int, metavar="N", help="degree of every multiplier")
    g.add_argument("--k", type=int, metavar="N", help="exponent of |z|^2 in the ROA constraints")
    g.add_argument("--epsilon", type=float, metavar="X", help="positivity margin of V")
    g.add_argument("--shrink-factor", type=float, metavar="X")
    g.add_argument("--max-shrink", type=int, metavar="N")
    g.add_argument("--all-pairs-slope", action="store_true", help="slope constraints on all node pairs")
    g.add_argument("--shift-output-bias", action="store_true", help="subtract pi(0) from the output bias")
    g.add_argument("--seed", type=int, metavar="N")
    g.add_argument("--psd-tol", type=float, metavar="X")
    g.add_argument("--recon-tol", type=float, metavar="X")


def _solver_opts(p: argparse.ArgumentParser):
    g = p.add_argument_group("solver")
    g.add_argument("--solver", choices=("embedded", "sdpa-export"), default="embedded")
    g.add_argument("--sdpa-out", metavar="PATH", help="where to write the .dat-s file (sdpa-export)")
    g.add_argument("--sdpa-solution", metavar="PATH", help="import this SDPA result instead of stopping")
    g.add_argument("--dump-constraints", action="store_true", help="also write the constraint dump")


def _overrides(args) -> dict:
    o = {}
    if getattr(args, "v_degree", None) is not None:
        o["deg_v"] = args.v_degree
    if getattr(args, "mult_degree", None) is not None:
        o.update(deg_s=args.mult_degree, deg_t=args.mult_degree, deg_p=args.mult_degree)
    if getattr(args, "k", None) is not None:
        o["deg_k"] = args.k
    for name in ("epsilon", "shrink_factor", "max_shrink", "seed", "psd_tol", "recon_tol"):
        v = getattr(args, name, None)
        if v is not None:
            o[name] = v
    if getattr(args, "all_pairs_slope", False):
        o["slope"] = "all"
    return o


def _network_hash(nn) -> str:
    return hashlib.sha256(json.dumps(nn.to_dict(), sort_keys=True).encode()).hexdigest()


def load_spec(path, args, check_equilibrium: bool = True) -> ProblemSpec:
    try:
        spec = load_definition(path, _overrides(args))
    except (ValueError, TypeError, KeyError, OSError) as exc:
        raise CliError(str(exc)) from exc
    if getattr(args, "shift_output_bias", False) and spec.network is not None:
        nn = spec.network
        shift = nn.forward(np.zeros(nn.n_in))
        spec.network = nn.with_output_shift(shift)
        spec.hashes["network_shifted"] = _network_hash(spec.network)
        log.info("output bias shifted by %s", shift.tolist())
    if check_equilibrium:
        eq = spec.equilibrium(1e-8)
        if not eq.passed:
            raise CliError(f"origin is not an equilibrium of the closed loop: |f(0, pi(0))| = {eq.residual:.3e} "
                           f"(pi(0) = {eq.u0.tolist()}); retry with --shift-output-bias to subtract pi(0)")
    return spec


def provenance(spec: ProblemSpec) -> list:
    """Header lines for every output file: tool version and input hashes."""
    return [f"nflsos {__version__} {spec.name}"] + [f"input {k} sha256 {v}" for k, v in sorted(spec.hashes.items())]


def _default_out(spec: ProblemSpec, suffix: str) -> Path:
    return Path(f"{spec.name}{suffix}")


# --------------------------------------------------------------------------
# commands


def _dump_text(spec: ProblemSpec, global_: bool) -> str:
    region = None if global_ else spec.region
    lp = build_lyapunov_program(spec, region)
    low = lp.prog.lower()
    head = [f"# {line}" for line in provenance(spec)]
    head += [f"# region: {region.to_list() if region is not None else 'global'}",
             f"# degrees: {spec.degrees.to_dict()}"]
    body = lp.A.S.dump()
    dyn = ["# closed-loop dynamics used by the program"]
    dyn += [f"d{s}/dt = {format_polynomial(f)}" for s, f in zip(spec.states, lp.A.f)]
    prog = [f"# SOS program: {low.sdp.n_rows} rows, {len(low.sdp.block_sizes)} PSD blocks, "
            f"{low.sdp.n_free} free, {low.eliminated} Gram entries fixed at zero"]
    for g in lp.prog.grams:
        kept = len(low.kept_bases.get(g.name, g.basis))
        prog.append(f"gram {g.name}: {g.size} monomials ({kept} kept)")
    for name, kind, idx in lp.multipliers:
        prog.append(f"multiplier {name} on {kind}[{idx}]")
    return "\n".join(head) + "\n" + body + "\n".join(dyn + prog) + "\n"


def _export_backend(args, spec: ProblemSpec):
    out = Path(args.sdpa_out) if args.sdpa_out else _default_out(spec, ".dat-s")

    def backend(sdp):
        sdpa.write_dats(sdp, out, f"nflsos {__version__} {spec.name}", provenance(spec))
        print(f"SDPA problem written to {out}")
        if args.sdpa_solution is None:
            raise _ExportOnly()
        try:
            return sdpa.read_solution(sdp, args.sdpa_solution)
        except (OSError, sdpa.SdpaFormatError) as exc:
            raise CliError(f"cannot import SDPA solution: {exc}") from exc
    return backend


def _report(res) -> None:
    print(f"status: {res.status} (solver: {res.solver_status})")
    if res.message:
        print(f"message: {res.message}")
    if res.final_region is not None:
        print(f"region: {res.final_region.to_list()}")
    if res.V is not None:
        print(f"V = {format_polynomial(res.V)}")
    if res.soundness is not None:
        s = res.soundness
        print(f"soundness: {s.n} samples, {s.positivity_violations} positivity and "
              f"{s.decrease_violations} decrease violations")


def _finish(spec: ProblemSpec, res, args, extra_ok: bool = True) -> int:
    _report(res)
    if res.status == INFEASIBLE:
        return EXIT_INFEASIBLE
    if res.status != FEASIBLE or not extra_ok:
        print("error: the solver's certificate failed soundness sampling", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out) if args.out else _default_out(spec, ".cert.json")
    certio.write_certificate(out, certio.certificate_document(spec, res))
    print(f"certificate written to {out}")
    return EXIT_OK


def _run(spec: ProblemSpec, args):
    if args.dump_constraints:
        out = _default_out(spec, ".constraints.txt") if not args.out else Path(args.out).with_suffix(".constraints.txt")
        out.write_text(_dump_text(spec, args.global_))
        print(f"constraint dump written to {out}")
    if args.solver == "sdpa-export":
        # no shrinking without a solver verdict: export the program for the given region
        backend = _export_backend(args, spec)
        return certify_global(spec, backend) if args.global_ else certify_local(spec, backend=backend)
    if args.global_:
        return certify_global(spec)
    if spec.region is None:
        # region given by polynomials only: nothing to shrink
        return certify_local(spec)
    return certify_shrinking(spec)


def cmd_certify(args) -> int:
    spec = load_spec(args.definition, args)
    try:
        res = _run(spec, args)
    except _ExportOnly:
        print("exported only; no certificate (rerun with --sdpa-solution to import a result)")
        return EXIT_OK
    return _finish(spec, res, args)


def _parse_values(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(f"cannot parse value list {text!r}") from exc


def cmd_robust(args) -> int:
    spec = load_spec(args.definition, args)
    if spec.robustness is None:
        raise CliError("the definition has no [robustness] section")
    if args.global_:
        raise CliError("robust analysis needs a region")
    rb = spec.robustness
    values = _parse_values(args.check_values) if args.check_values else list(np.linspace(rb.lower, rb.upper, 5))
    outside = [v for v in values if not rb.lower <= v <= rb.upper]
    if outside:
        raise CliError(f"check values {outside} lie outside [{rb.lower}, {rb.upper}]")
    try:
        res = _run(spec, args)
    except _ExportOnly:
        print("exported only; no certificate (rerun with --sdpa-solution to import a result)")
        return EXIT_OK
    ok = True
    if res.status == FEASIBLE:
        for v in values:
            rep = soundness_gate(spec, res.V, res.final_region, param_values={rb.param: float(v)})
            print(f"{rb.param} = {v:g}: {rep.n} samples, {rep.positivity_violations} positivity and "
                  f"{rep.decrease_violations} decrease violations")
            ok = ok and rep.ok
    return _finish(spec, res, args, ok)


def _verified_doc(cert_path, spec: ProblemSpec, samples: int, args) -> tuple:
    try:
        doc = certio.load_certificate(cert_path)
    except OSError as exc:
        raise CliError(str(exc)) from exc
    rep = certio.verify_certificate(doc, spec, samples=samples, psd_tol=args.psd_tol, recon_tol=args.recon_tol,
                                    seed=args.seed or 0)
    return doc, rep


def cmd_roa(args) -> int:
    spec = load_spec(args.definition, args, check_equilibrium=False)
    doc, rep = _verified_doc(args.certificate, spec, 0, args)
    if not rep.ok:
        raise CliError("certificate does not match the definition or fails its checks: " + "; ".join(rep.problems))
    res = certio.result_from_document(doc, spec)
    k = args.k if args.k is not None else doc["degrees"]["k"]
    res = roa_maximize(res, spec, k)
    if res.gamma is None or res.gamma <= 0:
        print(f"no positive ROA level: {res.message}")
        return EXIT_INFEASIBLE
    print(f"gamma = {res.gamma!r}")
    out = Path(args.out) if args.out else Path(args.certificate)
    certio.write_certificate(out, certio.with_roa(doc, spec, res))
    print(f"certificate with ROA data written to {out}")
    stem = out.name[:-len(".cert.json")] if out.name.endswith(".cert.json") else out.stem
    csv_path = Path(args.csv) if args.csv else out.with_name(stem + ".levelset.csv")
    pts = level_set_boundary(res.V, spec.states, res.gamma, args.samples, np.random.default_rng(args.seed or 0))
    write_points_csv(csv_path, pts, spec.states, provenance(spec) + [f"level set V <= {res.gamma!r}"])
    print(f"{len(pts)} level-set samples written to {csv_path}")
    return EXIT_OK


def cmd_check_cert(args) -> int:
    spec = load_spec(args.definition, args, check_equilibrium=False)
    doc, rep = _verified_doc(args.certificate, spec, args.n, args)
    print(f"content hash: {'ok' if rep.hash_ok else 'MISMATCH'}")
    for name in sorted(rep.identity_residuals):
        print(f"identity {name}: residual {rep.identity_residuals[name]:.3e}")
    if rep.min_eigenvalues:
        name = min(rep.min_eigenvalues, key=rep.min_eigenvalues.get)
        print(f"smallest Gram eigenvalue: {rep.min_eigenvalues[name]:.3e} ({name})")
    if rep.sampling is not None:
        s = rep.sampling
        print(f"sampling: {s.n} points, {s.positivity_violations} positivity and "
              f"{s.decrease_violations} decrease violations")
    for p in rep.problems:
        print(f"problem: {p}")
    print("PASS" if rep.ok else "FAIL")
    return EXIT_OK if rep.ok else EXIT_ERROR


def cmd_dump(args) -> int:
    spec = load_spec(args.definition, args, check_equilibrium=False)
    text = _dump_text(spec, args.global_)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = load_spec(args.definition, args, check_equilibrium=False)
    params = {}
    if spec.robustness is not None:
        rb = spec.robustness
        v = args.param if args.param is not None else (rb.nominal if rb.nominal is not None
                                                        else 0.5 * (rb.lower + rb.upper))
        params[rb.param] = float(v)
    loop = spec.closed_loop(params)
    cfg = SimConfig(step=args.step, horizon=args.horizon)
    out = Path(args.out) if args.out else _default_out(spec, ".sim.csv")
    modes = sum(x is not None for x in (args.x0, args.grid, args.count))
    if modes != 1:
        raise CliError("give exactly one of --x0, --grid or --count")
    if args.x0 is not None:
        z0 = _parse_values(args.x0)
        if len(z0) != len(spec.states):
            raise CliError(f"--x0 needs {len(spec.states)} values")
        traj = integrate(loop, z0, cfg)
        write_trajectory_csv(out, traj, spec.states, provenance(spec) + [f"params {params}"])
        print(f"trajectory {traj.exit_reason} after {traj.times[-1]:g} s; written to {out}")
        return EXIT_OK
    rng = np.random.default_rng(args.seed or 0)
    if args.certificate:
        doc = certio.load_certificate(args.certificate)
        if not (doc.get("roa") or {}).get("gamma"):
            raise CliError("certificate has no ROA level; run the roa command first")
        res = certio.result_from_document(doc, spec)
        if args.count is None:
            raise CliError("sampling inside a level set needs --count")
        pts = sample_in_level_set(res.V, spec.states, doc["roa"]["gamma"], res.final_region, args.count, rng)
        batch = integrate_batch(loop, pts, cfg)
    else:
        region = spec.region
        if region is None:
            raise CliError("the definition has no region to sample")
        batch = basin_sample(loop, region, grid=args.grid, count=args.count, config=cfg, seed=args.seed or 0)
    write_basin_csv(out, batch, spec.states, provenance(spec) + [f"params {params}"])
    n_div = sum(r == "diverged" for r in batch.reasons)
    print(f"{int(batch.converged.sum())}/{len(batch.reasons)} converged, {n_div} diverged; written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors, which is our infeasibility code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nflsos", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"nflsos {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", help="Lyapunov certificate (region shrinking, or --global)")
    c.add_argument("definition")
    c.add_argument("-o", "--out", help="certificate path (default <name>.cert.json)")
    _common(c)
    _solver_opts(c)
    c.set_defaults(func=cmd_certify)

    r = sub.add_parser("robust", help="certificate over the parameter interval, checked at fixed values")
    r.add_argument("definition")
    r.add_argument("-o", "--out")
    r.add_argument("--check-values", metavar="A,B,...", help="parameter values for the per-value soundness check")
    _common(r)
    _solver_opts(r)
    r.set_defaults(func=cmd_robust)

    a = sub.add_parser("roa", help="largest level set of a certified V inside its region")
    a.add_argument("certificate")
    a.add_argument("definition")
    a.add_argument("-o", "--out", help="updated certificate (default: overwrite the input)")
    a.add_argument("--csv", help="level-set sample CSV")
    a.add_argument("--samples", type=int, default=200)
    _common(a)
    a.set_defaults(func=cmd_roa)

    s = sub.add_parser("simulate", help="RK4 simulation of the true closed loop")
    s.add_argument("definition")
    s.add_argument("-o", "--out")
    s.add_argument("--x0", help="single initial state, comma separated")
    s.add_argument("--grid", type=int, help="grid points per axis over the region")
    s.add_argument("--count", type=int, help="number of random initial states")
    s.add_argument("--certificate", help="draw the initial states from {V <= gamma} of this certificate")
    s.add_argument("--param", type=float, help="value of the uncertain parameter")
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--horizon", type=float, default=30.0)
    _common(s)
    s.set_defaults(func=cmd_simulate)

    k = sub.add_parser("check-cert", help="solver-free re-verification of a certificate")
    k.add_argument("certificate")
    k.add_argument("definition")
    k.add_argument("--n", type=int, default=10_000, help="sampling points (0: Gram checks only)")
    _common(k)
    k.set_defaults(func=cmd_check_cert)

    d = sub.add_parser("dump-constraints", help="print the constraint set with provenance tags")
    d.add_argument("definition")
    d.add_argument("-o", "--out")
    _common(d)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DefinitionError, certio.CertificateFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
