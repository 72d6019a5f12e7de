import math

import numpy as np
import pytest

from localfk.elliptic import (
    CoefficientField,
    EllipticityError,
    ScalarField,
    SolverError,
    assemble_operator,
    solve_shifted,
    step_parabolic,
)
from localfk.geometry import build_domain
from localfk.spectral import calibrate_potential, principal_eigenpair

from conftest import SQUARE


def _interior_row(op, mask):
    i = op.index[mask.cell_index([0.5 + mask.h / 2, 0.5 + mask.h / 2])]
    row = op.matrix.getrow(i)
    return i, dict(zip(row.indices, row.data))


def test_five_point_stencil(square16):
    op = assemble_operator(square16)
    i, row = _interior_row(op, square16)
    h2 = square16.h**2
    assert math.isclose(row.pop(i), -4 / h2)
    assert len(row) == 4 and all(math.isclose(v, 1 / h2) for v in row.values())


def test_axis_scaling(square16):
    A = CoefficientField.constant(square16, [2.0, 1.0])
    op = assemble_operator(square16, A)
    i, row = _interior_row(op, square16)
    nb = op.neighbors[i]
    h2 = square16.h**2
    assert math.isclose(row[nb[0]], 2 / h2) and math.isclose(row[nb[1]], 2 / h2)
    assert math.isclose(row[nb[2]], 1 / h2) and math.isclose(row[nb[3]], 1 / h2)


def test_checkerboard_harmonic_mean(square16):
    A = CoefficientField.checkerboard(square16, 1.0, 2.0)
    op = assemble_operator(square16, A)
    i, row = _interior_row(op, square16)
    row.pop(i)
    assert all(math.isclose(v, 4 / 3 / square16.h**2) for v in row.values())


def test_ellipticity_violation_names_cell(square16):
    diag = np.ones(square16.shape + (2,))
    diag[5, 7, 1] = 10.0
    A = CoefficientField(diag, 1.0, 2.0)
    with pytest.raises(EllipticityError, match=r"\(5, 7\)"):
        assemble_operator(square16, A)


def test_off_diagonal_rejected(square16):
    with pytest.raises(ValueError):
        CoefficientField.constant(square16, [[2.0, 0.5], [0.5, 1.0]])


def test_symmetry_and_sign(square16, rng):
    op = assemble_operator(square16, CoefficientField.checkerboard(square16))
    for _ in range(100):
        u = ScalarField.from_inside(square16, rng.standard_normal(op.size))
        v = ScalarField.from_inside(square16, rng.standard_normal(op.size))
        a, b = op.inner(op.apply(u), v), op.inner(u, op.apply(v))
        assert abs(a - b) <= 1e-12 * max(abs(a), 1.0)
        assert op.inner(op.apply(u), u) <= 0


def test_dirichlet_form_identity(rng):
    mask = build_domain({"type": "lshape", "size": 1.0}, 1 / 16)
    op = assemble_operator(mask)
    u = ScalarField.from_inside(mask, rng.standard_normal(mask.count))
    h, hn = mask.h, mask.cell_measure
    vals = np.pad(np.where(mask.inside, u.values, 0.0), 1)
    ins = np.pad(mask.inside, 1)
    total = 0.0
    for k in range(2):
        a = np.take(vals, range(vals.shape[k] - 1), axis=k)
        b = np.take(vals, range(1, vals.shape[k]), axis=k)
        ia = np.take(ins, range(ins.shape[k] - 1), axis=k)
        ib = np.take(ins, range(1, ins.shape[k]), axis=k)
        total += np.sum(((a - b) / h) ** 2 * (ia & ib)) * hn
        # faces on the boundary: the zero value sits on the face, half a cell away
        total += np.sum(2 * (a**2 * (ia & ~ib) + b**2 * (ib & ~ia)) / h**2) * hn
    assert math.isclose(op.inner(op.apply(u), u), -total, rel_tol=1e-12)


def test_discrete_ellipticity(square16, rng):
    A = CoefficientField.checkerboard(square16, 1.0, 3.0)
    LI, LA = assemble_operator(square16), assemble_operator(square16, A)
    for _ in range(20):
        u = ScalarField.from_inside(square16, rng.standard_normal(LI.size))
        qi, qa = LI.inner(LI.apply(u), u), LA.inner(LA.apply(u), u)
        assert A.lam * qi >= qa * (1 + 1e-12) - 1e-9 or math.isclose(A.lam * qi, qa)
        assert qa >= A.Lam * qi * (1 + 1e-12) - 1e-9


def test_solve_shifted_manufactured(square16, rng):
    op = assemble_operator(square16)
    x = ScalarField.from_inside(square16, rng.standard_normal(op.size))
    rhs = ScalarField.from_inside(square16, 3.0 * x.inside() - op.matrix @ x.inside())
    got = solve_shifted(op, 3.0, rhs)
    assert np.allclose(got.inside(), x.inside(), rtol=0, atol=1e-8)
    zero = solve_shifted(op, 3.0, ScalarField.zeros(square16))
    assert not zero.inside().any()


def test_solve_shifted_eigenfunction(square16):
    op = assemble_operator(square16)
    pair = principal_eigenpair(op)
    got = solve_shifted(op, 2.0, pair.u)
    ref = pair.u.inside() / (2.0 + pair.eigenvalue)
    assert np.allclose(got.inside(), ref, atol=1e-9)


def test_solver_failure_carries_residual(square16, rng):
    op = assemble_operator(square16)
    rhs = ScalarField.from_inside(square16, rng.standard_normal(op.size))
    with pytest.raises(SolverError) as info:
        solve_shifted(op, 1e-3, rhs, tol=1e-14, maxiter=2)
    assert info.value.residual > 0
    with pytest.raises(ValueError):
        solve_shifted(op, -1.0, rhs)


def test_step_decays_eigenmode(square16):
    op = assemble_operator(square16)
    pair = principal_eigenpair(op)
    dt = 1e-3
    nxt = step_parabolic(op, None, pair.u, dt)
    ratio = nxt.inside() / pair.u.inside()
    assert np.allclose(ratio, math.exp(-pair.eigenvalue * dt), rtol=1e-6)


def test_step_steady_state(square16):
    op = assemble_operator(square16)
    cal = calibrate_potential(op, ScalarField.constant(square16, 1.0))
    V = ScalarField.constant(square16, cal.scale)
    nxt = step_parabolic(op, V, cal.u, 1e-3)
    assert np.allclose(nxt.inside(), cal.u.inside(), atol=1e-8)


def test_maximum_principle_and_positivity(square16, rng):
    op = assemble_operator(square16)
    V = ScalarField.from_inside(square16, -rng.uniform(0, 5, op.size))
    w = ScalarField.from_inside(square16, rng.uniform(0, 1, op.size))
    for theta in (0.5, 1.0):
        nxt = step_parabolic(op, V, w, 1e-4, theta)
        assert nxt.sup() <= w.sup() + 1e-12
    impl = step_parabolic(op, None, w, 0.05, 1.0)
    assert impl.inside().min() >= -1e-10


def test_scalar_field_outside_zero(square16):
    f = ScalarField(square16, np.ones(square16.shape))
    assert f.values[0, 0] == 0 and f.integral() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        f.values[1, 1] = 2.0
