import copy
import json

import numpy as np
import pytest

from nflsos.certifier import certify_global, certify_local, roa_maximize
from nflsos.certio import (CertificateFormatError, certificate_document, content_hash, load_certificate,
                           result_from_document, verify_certificate, with_roa, write_certificate)
from nflsos.system import definition_from_dict

DISK = {"states": ["z1", "z2"], "inputs": ["u"], "dynamics": {"z1": "-z1 + u", "z2": "-z2"},
        "region": {"polynomials": ["1 - z1^2 - z2^2"]}}


@pytest.fixture(scope="module")
def disk():
    spec = definition_from_dict(DISK, name="disk", hashes={"definition": "0" * 64})
    res = certify_local(spec)
    assert res.feasible
    return spec, res


def test_document_roundtrip_and_verify(tmp_path, disk):
    spec, res = disk
    doc = certificate_document(spec, res)
    write_certificate(tmp_path / "c.json", doc)
    back = load_certificate(tmp_path / "c.json")
    assert back == doc
    rep = verify_certificate(back, spec, samples=2000)
    assert rep.ok, rep.problems
    assert rep.hash_ok and rep.sampling.ok
    assert max(rep.identity_residuals.values()) <= spec.options.recon_tol
    assert min(rep.min_eigenvalues.values()) >= -spec.options.psd_tol


def test_document_is_deterministic(disk):
    spec, res = disk
    a = json.dumps(certificate_document(spec, res), sort_keys=True)
    b = json.dumps(certificate_document(spec, certify_local(spec)), sort_keys=True)
    assert a == b


def test_tampered_v_is_caught(disk):
    spec, res = disk
    doc = certificate_document(spec, res)
    bad = copy.deepcopy(doc)
    bad["lyapunov"]["V"][0][1] *= 1.5
    rep = verify_certificate(bad)
    assert not rep.hash_ok and "content hash mismatch" in rep.problems
    bad["content_sha256"] = content_hash(bad)
    rep = verify_certificate(bad)
    assert rep.hash_ok and any("residual" in p for p in rep.problems)


def test_negative_gram_is_caught(disk):
    spec, res = disk
    bad = copy.deepcopy(certificate_document(spec, res))
    g = bad["gram"]["V"]
    n = len(g["basis"])
    Q = np.array(g["matrix"]).reshape(n, n)
    Q[0, 0] = -1.0
    g["matrix"] = Q.ravel().tolist()
    bad["content_sha256"] = content_hash(bad)
    assert any("eigenvalue" in p for p in verify_certificate(bad).problems)


def test_input_hash_mismatch(disk):
    spec, res = disk
    doc = certificate_document(spec, res)
    other = definition_from_dict(DISK, name="disk", hashes={"definition": "1" * 64})
    assert any("hash differs" in p for p in verify_certificate(doc, other).problems)


def test_edited_dynamics_fail_sampling(disk):
    spec, res = disk
    doc = certificate_document(spec, res)
    unstable = definition_from_dict({**DISK, "dynamics": {"z1": "z1", "z2": "-z2"}}, name="disk",
                                    hashes={"definition": "0" * 64})
    rep = verify_certificate(doc, unstable, samples=500)
    assert rep.sampling.decrease_violations > 0 and not rep.ok


def test_with_roa_rehashes_and_verifies(disk):
    spec, res = disk
    doc = certificate_document(spec, res)
    base = result_from_document(doc, spec)
    assert base.V.almost_equal(res.V, 0.0)
    roa = roa_maximize(base, spec, k=1)
    out = with_roa(doc, spec, roa)
    assert out["content_sha256"] == content_hash(out) != doc["content_sha256"]
    assert verify_certificate(out).ok
    t = res.V.terms
    b = t.get(((0, 1), (1, 1)), 0.0) / 2
    # the largest disk sublevel set of a quadratic V has level lambda_min(P)
    lam = min(np.linalg.eigvalsh(np.array([[t.get(((0, 2),), 0.0), b], [b, t.get(((1, 2),), 0.0)]])))
    assert abs(out["roa"]["gamma"] - lam) <= 1e-5
    forged = copy.deepcopy(out)
    forged["roa"]["gamma"] *= 1.1
    forged["content_sha256"] = content_hash(forged)
    assert not verify_certificate(forged).ok


def test_global_certificate_has_no_region():
    spec = definition_from_dict({"states": ["z"], "inputs": ["u"], "dynamics": {"z": "-z"}}, name="lin")
    doc = certificate_document(spec, certify_global(spec))
    assert doc["kind"] == "global" and doc["region"] is None and doc["roa"] is None
    assert verify_certificate(doc, spec, samples=100).ok


def test_not_a_certificate(tmp_path):
    (tmp_path / "x.json").write_text("{]")
    with pytest.raises(CertificateFormatError):
        load_certificate(tmp_path / "x.json")
    (tmp_path / "y.json").write_text('{"format": "other"}')
    with pytest.raises(CertificateFormatError):
        load_certificate(tmp_path / "y.json")
