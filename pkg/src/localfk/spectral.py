"""Principal eigenpairs, potential calibration and analytic fixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import splu
from scipy.special import gamma, jv

from .elliptic import DiscreteOperator, ScalarField, _cg, assemble_operator, default_maxiter
from .geometry import DomainError, DomainMask, build_domain


class EigenError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EigenPair:
    eigenvalue: float
    u: ScalarField
    residual: float
    iterations: int


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    scale: float
    u: ScalarField
    eigenvalue: float
    evaluations: int


def _factor(A):
    # minimum-degree ordering on A + A^T keeps fill-in manageable
    lu = splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
    return lambda b, x0: lu.solve(b)


def _cg_solver(A):
    A = A.tocsr()
    return lambda b, x0: _cg(A, b, x0, tol=1e-12, maxiter=20 * default_maxiter(len(b)))


def _inverse_iteration(M, start, tol, maxiter, lower, direct=True):
    """Smallest eigenpair of the symmetric matrix ``M``.

    ``lower`` must be a strict lower bound of the spectrum. Once the iterate
    is dominated by the principal mode the shift moves up to just below the
    Rayleigh quotient (by twice the residual norm, which keeps it under the
    smallest eigenvalue), turning slow inverse iteration into a few fast
    steps. With ``direct=False`` the shifted systems stay positive definite
    and are solved by conjugate gradients.
    """
    make = _factor if direct else _cg_solver
    m = M.shape[0]
    eye = sp.identity(m, format="csr")
    x = np.ones(m) if start is None else np.abs(np.asarray(start, dtype=float)) + 1e-12
    x /= np.linalg.norm(x)
    shift = lower
    solve = make(M - shift * eye)
    rq = float(x @ (M @ x))
    restarts = 0
    for it in range(1, maxiter + 1):
        y = solve(x, x / max(rq - shift, 1e-300))
        x = y / np.linalg.norm(y)
        Mx = M @ x
        rq = float(x @ Mx)
        scale = max(abs(rq), abs(rq - lower), 1e-300)
        r_abs = float(np.linalg.norm(Mx - rq * x))
        res = r_abs / scale
        if res <= tol:
            return rq, x, res, it
        if res < 1e-2 and restarts < 4 and (rq - 2 * r_abs - shift) > 1e-3 * (rq - shift):
            restarts += 1
            shift = rq - 2 * r_abs
            solve = make(M - shift * eye)
    raise EigenError(f"inverse iteration did not converge; last Rayleigh quotient {rq:.10g}")


def eigen_with_potential(op: DiscreteOperator, V: ScalarField | None = None, tol: float = 1e-8,
                         maxiter: int = 2000, start=None) -> EigenPair:
    """Smallest eigenvalue of ``-(L + V)`` with its positive eigenfunction.

    The eigenfunction is normalized to sup norm one with a positive maximum.
    """
    if V is None:
        vec = np.zeros(op.size)
    else:
        vec = V.inside() if isinstance(V, ScalarField) else np.asarray(V, dtype=float)
    M = (-op.with_potential(vec)).tocsr()
    lower = -float(vec.max(initial=0.0)) - 1e-9 * (1.0 + abs(float(vec.max(initial=0.0))))
    if start is not None and isinstance(start, ScalarField):
        start = start.inside()
    mu, x, res, its = _inverse_iteration(M, start, tol, maxiter, lower, direct=op.mask.n < 3)
    if x[np.argmax(np.abs(x))] < 0:
        x = -x
    x = x / np.abs(x).max()
    return EigenPair(mu, ScalarField.from_inside(op.mask, x), res, its)


def principal_eigenpair(op: DiscreteOperator, tol: float = 1e-8, maxiter: int = 2000) -> EigenPair:
    """Principal Dirichlet eigenpair of ``-L``."""
    return eigen_with_potential(op, None, tol, maxiter)


def calibrate_potential(op: DiscreteOperator, V0: ScalarField, tol: float = 1e-6,
                        eig_tol: float = 1e-10) -> CalibrationResult:
    """Scale ``V0`` so that ``L + s V0`` has top eigenvalue zero.

    The ground energy ``mu(s)`` is concave and strictly decreasing in ``s``
    on the support of ``V0``, so a bracketed root search converges. The
    bracket starts at ``[0, 2 lambda_1 / min V0]`` (minimum over the
    support) and is doubled until it contains the root.
    """
    v0 = V0.inside()
    if np.any(v0 < 0):
        raise CalibrationError("template potential must be nonnegative")
    if not np.any(v0 > 0):
        raise CalibrationError("template potential vanishes on the domain; no nontrivial solution")
    base = principal_eigenpair(op, tol=eig_tol)
    lam1 = base.eigenvalue
    state = {"start": base.u.inside(), "evals": 0}

    def mu(s):
        pair = eigen_with_potential(op, s * v0, tol=eig_tol, start=state["start"])
        state["start"] = pair.u.inside()
        state["evals"] += 1
        return pair.eigenvalue

    hi = 2.0 * lam1 / v0[v0 > 0].min()
    for _ in range(60):
        if mu(hi) < 0:
            break
        hi *= 2.0
    else:
        raise CalibrationError("could not bracket the calibration scale; template too concentrated")
    s = brentq(mu, 0.0, hi, xtol=1e-14 * hi, rtol=4 * np.finfo(float).eps, maxiter=200)
    pair = eigen_with_potential(op, s * v0, tol=eig_tol, start=state["start"])
    if abs(pair.eigenvalue) > tol * lam1:
        raise CalibrationError(
            f"calibration stalled: ground energy {pair.eigenvalue:.3e} at scale {s:.6g}"
        )
    return CalibrationResult(s, pair.u, pair.eigenvalue, state["evals"] + 1)


def argmax_abs(u: ScalarField, rtol: float = 1e-12):
    """Cell center where ``|u|`` is maximal, and the sign of ``u`` there.

    Values within ``rtol`` of the maximum count as ties; the lowest
    lexicographic cell index wins.
    """
    a = np.where(u.mask.inside, np.abs(u.values), -np.inf)
    top = a.max()
    if not top > 0:
        raise ValueError("field vanishes identically")
    flat = np.flatnonzero(a.ravel() >= top * (1 - rtol))[0]
    index = np.unravel_index(flat, a.shape)
    sign = 1 if u.values[index] > 0 else -1
    return u.mask.center_of(index), sign


def sine_fixture(m: int, n: int, h: float):
    """``u = sin(n pi x) sin(m pi y)`` on the unit square with ``V = (m^2+n^2) pi^2``."""
    if m < 1 or n < 1:
        raise ValueError("frequencies must be positive")
    mask = build_domain({"type": "box", "lower": [0, 0], "upper": [1, 1]}, h)
    c = mask.centers()
    u = ScalarField(mask, np.sin(n * np.pi * c[..., 0]) * np.sin(m * np.pi * c[..., 1]))
    V = ScalarField.constant(mask, (m * m + n * n) * np.pi**2, "1/length^2")
    return u, V


def log_spike_profile(r, eps):
    r = np.asarray(r, dtype=float)
    inner = 0.5 - np.log(eps) - r**2 / (2 * eps**2)
    with np.errstate(divide="ignore"):
        outer = -np.log(np.where(r > 0, r, 1.0))
    return np.where(r <= eps, inner, outer)


def log_spike_potential(r, eps):
    r = np.asarray(r, dtype=float)
    u = log_spike_profile(np.minimum(r, eps), eps)
    return np.where(r < eps, 2.0 / (eps**2 * u), 0.0)


def log_spike_fixture(eps: float, h: float):
    """Radial pair on the unit disk with a potential spike of radius ``eps``.

    ``u`` is quadratic inside the spike and ``-log r`` outside, with matching
    value and slope at ``r = eps``; ``V = -Laplacian(u) / u``.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if eps < 4 * h:
        raise DomainError(f"spike radius {eps:.4g} is not resolved by h={h:.4g} (need eps >= 4h)")
    mask = build_domain({"type": "disk", "center": [0, 0], "radius": 1.0}, h)
    r = np.linalg.norm(mask.centers(), axis=-1)
    return (
        ScalarField(mask, log_spike_profile(r, eps)),
        ScalarField(mask, log_spike_potential(r, eps), "1/length^2"),
    )


def log_spike_l1(eps: float) -> float:
    """Closed-form L1 norm of the spike potential on the unit disk."""
    L = -math.log(eps)
    return 4 * math.pi * math.log1p(1 / (2 * L))


def bessel_zero(nu: float) -> float:
    """First positive zero of J_nu for nu > -1."""
    lo = 1e-3
    hi = nu + 2.5 + 2 * math.sqrt(nu + 1)
    xs = np.linspace(lo, hi, 400)
    vals = jv(nu, xs)
    k = int(np.argmax(np.sign(vals[1:]) != np.sign(vals[:-1])))
    return brentq(lambda x: jv(nu, x), xs[k], xs[k + 1], xtol=1e-15)


def faber_krahn_constant(n: int) -> float:
    """``pi j^2 / Gamma(n/2+1)^(2/n)``, the sharp lower bound of lambda_1 |Omega|^(2/n)."""
    j = bessel_zero(n / 2 - 1)
    return math.pi * j * j / gamma(n / 2 + 1) ** (2 / n)


def faber_krahn_ratio(mask: DomainMask, eigenvalue: float) -> float:
    return eigenvalue * mask.measure ** (2 / mask.n) / faber_krahn_constant(mask.n)


def domain_eigenvalue(desc: dict, h: float) -> float:
    return principal_eigenpair(assemble_operator(build_domain(desc, h))).eigenvalue
