import json
import math

import numpy as np
import pytest

from localfk.elliptic import ScalarField, assemble_operator
from localfk.geometry import BallSpec, ball_cells, build_domain, unit_ball_volume
from localfk.spectral import principal_eigenpair
from localfk.verify import (
    Certificate,
    StageError,
    best_ball_norm,
    calibrated_pair,
    certify_pair,
    global_baselines,
    potential_template,
    run_jobs,
    theorem1_certificate,
    theorem2_certificate,
    theorem3_check,
)

from conftest import CUBE, DISK, SQUARE

BIG = build_domain({"type": "box", "lower": [0, 0, 0], "upper": [2, 2, 2]}, 1 / 8)


def test_best_ball_zero():
    center, value = best_ball_norm(ScalarField.zeros(BIG), BIG, 0.5)
    assert value == 0.0 and len(center) == 3


def test_best_ball_constant():
    r = 0.5
    center, value = best_ball_norm(ScalarField.constant(BIG, 3.0), BIG, r)
    cells = ball_cells(BIG, BallSpec(tuple(center), r)).sum()
    assert value == pytest.approx(3.0 * (cells * BIG.cell_measure) ** (2 / 3), rel=1e-12)
    assert value == pytest.approx(3.0 * (unit_ball_volume(3) * r**3) ** (2 / 3), rel=0.05)


def test_best_ball_corner_support():
    V = ScalarField.from_function(BIG, lambda p: np.all(p < 0.3, axis=-1).astype(float))
    center, value = best_ball_norm(V, BIG, 0.4)
    assert value > 0
    assert np.linalg.norm(np.asarray(center) - 0.15) <= 0.4


def test_best_ball_log_kind(square16):
    V = ScalarField.constant(square16, 1.0)
    center, value = best_ball_norm(V, square16, 0.25, "log")
    # ball inside: pi r^2 for a unit field
    assert value == pytest.approx(math.pi * 0.25**2, rel=0.03)
    with pytest.raises(ValueError):
        best_ball_norm(V, square16, 0.01)
    with pytest.raises(ValueError):
        best_ball_norm(ScalarField.constant(BIG, 1.0), BIG, 0.5, "log")


def test_global_baselines_barta_disk(disk32):
    lam = principal_eigenpair(assemble_operator(disk32)).eigenvalue
    base = global_baselines(disk32, ScalarField.constant(disk32, lam), math.inf, lam)
    assert base["barta_ratio"] == pytest.approx(1.0)
    assert base["fk_ratio"] == pytest.approx(1.0, abs=0.03)
    with pytest.raises(ValueError):
        global_baselines(disk32, ScalarField.constant(disk32, 1.0), 1.0, lam)


def test_potential_templates(square16):
    assert potential_template(square16, None).sup() == 1.0
    b = potential_template(square16, {"type": "ball", "center": [0.5, 0.5], "radius": 0.2, "scale": 2})
    assert b.sup() == 2.0
    with pytest.raises(ValueError):
        potential_template(square16, {"type": "ball", "center": [5, 5], "radius": 0.1})
    with pytest.raises(ValueError):
        potential_template(square16, {"type": "bogus"})


@pytest.fixture(scope="module")
def cube_certificate():
    return theorem1_certificate(CUBE, 1 / 16)


@pytest.mark.slow
def test_lorentz_certificate_cube(cube_certificate):
    cert = cube_certificate
    assert cert.verdict == "PASS" and cert.theorem == "T1"
    lam = cert.potential["scale"]
    assert lam == pytest.approx(3 * math.pi**2, rel=0.01)
    # ball of radius sqrt(T) sits inside the cube: lambda T omega^(2/3)
    assert cert.norm_value == pytest.approx(lam * cert.T * unit_ball_volume(3) ** (2 / 3), rel=0.1)
    assert cert.chain["consistent"]
    assert cert.chain["survival_at_T"] == pytest.approx(0.5, abs=1e-3)
    assert cert.chain["fk_value"] >= 0.98
    assert cert.lorentz_normalization


def test_certificate_json_roundtrip(cube_certificate, tmp_path):
    text = cube_certificate.to_json()
    back = Certificate.from_json(text)
    assert back.to_json() == text
    d = json.loads(text)
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        Certificate.from_json(json.dumps(d))
    bad = Certificate.from_json(text)
    bad.norm_value = float("nan")
    with pytest.raises(ValueError):
        bad.to_json()


def test_sign_branch_invariance():
    mask, A, u, V, rec = calibrated_pair(SQUARE, 1 / 16)
    a = certify_pair("T2", mask, u, V, chain=False, domain=SQUARE).to_dict()
    b = certify_pair("T2", mask, -u, V, chain=False, domain=SQUARE).to_dict()
    assert a.pop("sign_branch") == "u" and b.pop("sign_branch") == "-u"
    assert a == b


def test_log_certificate_disk_constant():
    cert = theorem2_certificate(DISK, 1 / 16, chain=False)
    assert cert.verdict == "PASS" and cert.norm_kind == "log"
    assert cert.radius == pytest.approx(math.sqrt(4 * cert.T))


def test_log_certificate_zero_potential_rejected():
    with pytest.raises(StageError) as info:
        theorem2_certificate(DISK, 1 / 16, template={"type": "zero"}, chain=False)
    assert info.value.stage == "calibrate"


def test_log_certificate_spike():
    cert = theorem2_certificate(None, 1 / 256, source="log-spike", eps=math.exp(-2))
    assert cert.verdict == "PASS"
    assert cert.potential["l1_norm"] == pytest.approx(4 * math.pi * math.log1p(1 / 4), rel=0.05)


def test_proximity_cases():
    small = {"type": "constant", "value": 1e-3}
    for eta in (0.1, 0.25, 0.4):
        cert = theorem3_check(CUBE, 1 / 16, V=small, eta=eta)
        assert cert.verdict == "PASS"
        assert cert.intersection_fraction >= cert.fraction_bound
    vac = theorem3_check(CUBE, 1 / 16, V=small, eta=0.49)
    assert vac.fraction_bound < 0.04 and vac.verdict == "PASS"
    with pytest.raises(ValueError):
        theorem3_check(CUBE, 1 / 16, V=small, eta=1.0)


@pytest.mark.slow
def test_proximity_not_applicable():
    cert = theorem3_check(CUBE, 1 / 16, eta=0.25, calibrate=True)
    assert cert.verdict == "NOT-APPLICABLE" and not cert.hypothesis["holds"]


def test_run_jobs_ordered():
    jobs = {"b": lambda: 2, "a": lambda: 1, "c": lambda: 3}
    assert list(run_jobs(jobs, threads=3).items()) == [("a", 1), ("b", 2), ("c", 3)]
    assert run_jobs(jobs) == run_jobs(jobs, threads=2)
