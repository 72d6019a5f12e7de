"""Finite-volume discretization of div(A grad .) with Dirichlet conditions.

Unknowns live on the inside cells of a :class:`DomainMask`. Fluxes use a
two-point stencil: between two inside cells the face coefficient is the
harmonic mean of the diagonal entries of A; on a face between an inside and
an outside cell the Dirichlet value is imposed on the face itself, half a
cell away, which doubles the weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .geometry import DomainMask


class EllipticityError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Per-cell diagonal coefficient matrix with ellipticity bounds.

    ``diag`` has shape ``(*mask.shape, n)``. Off-diagonal entries are not
    supported by the two-point flux and are rejected on construction.
    """

    diag: np.ndarray
    lam: float
    Lam: float

    def __post_init__(self):
        if not 0 < self.lam <= self.Lam < np.inf:
            raise EllipticityError(f"need 0 < lambda <= Lambda < inf, got {self.lam}, {self.Lam}")

    @classmethod
    def identity(cls, mask: DomainMask) -> "CoefficientField":
        return cls(np.ones(mask.shape + (mask.n,)), 1.0, 1.0)

    @classmethod
    def constant(cls, mask: DomainMask, matrix) -> "CoefficientField":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim == 1:
            matrix = np.diag(matrix)
        mats = np.broadcast_to(matrix, mask.shape + matrix.shape)
        return cls.from_matrices(mask, mats)

    @classmethod
    def from_matrices(cls, mask: DomainMask, mats, lam=None, Lam=None) -> "CoefficientField":
        mats = np.asarray(mats, dtype=float)
        n = mask.n
        if mats.shape != mask.shape + (n, n):
            raise ValueError(f"expected matrices of shape {mask.shape + (n, n)}, got {mats.shape}")
        if not np.allclose(mats, np.swapaxes(mats, -1, -2)):
            raise EllipticityError("coefficient matrices must be symmetric")
        off = mats - np.eye(n) * np.diagonal(mats, axis1=-2, axis2=-1)[..., None, :]
        if np.any(off[mask.inside] != 0):
            raise ValueError("off-diagonal coefficients are not supported by the two-point flux")
        diag = np.diagonal(mats, axis1=-2, axis2=-1).copy()
        vals = diag[mask.inside]
        lam = float(vals.min()) if lam is None else float(lam)
        Lam = float(vals.max()) if Lam is None else float(Lam)
        field_ = cls(diag, lam, Lam)
        field_.check(mask)
        return field_

    @classmethod
    def checkerboard(cls, mask: DomainMask, a: float = 1.0, b: float = 2.0) -> "CoefficientField":
        parity = np.indices(mask.shape).sum(axis=0) % 2
        scal = np.where(parity == 0, a, b)
        diag = np.repeat(scal[..., None], mask.n, axis=-1).astype(float)
        return cls(diag, min(a, b), max(a, b))

    def check(self, mask: DomainMask) -> None:
        """Raise :class:`EllipticityError` naming the first offending cell."""
        vals = self.diag[mask.inside]
        bad = np.any((vals < self.lam * (1 - 1e-12)) | (vals > self.Lam * (1 + 1e-12)), axis=-1)
        if bad.any():
            cell = tuple(int(i) for i in np.argwhere(mask.inside)[np.argmax(bad)])
            raise EllipticityError(
                f"cell {cell} has eigenvalues {self.diag[cell].tolist()} outside "
                f"[{self.lam}, {self.Lam}]"
            )


@dataclass(frozen=True, eq=False)
class ScalarField:
    mask: DomainMask
    values: np.ndarray
    unit: str = ""

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.mask.shape:
            raise ValueError(f"field shape {vals.shape} does not match mask {self.mask.shape}")
        vals[~self.mask.inside] = 0.0
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, mask, unit=""):
        return cls(mask, np.zeros(mask.shape), unit)

    @classmethod
    def constant(cls, mask, c, unit=""):
        return cls(mask, np.full(mask.shape, float(c)), unit)

    @classmethod
    def from_inside(cls, mask, vec, unit=""):
        vals = np.zeros(mask.shape)
        vals[mask.inside] = vec
        return cls(mask, vals, unit)

    @classmethod
    def from_function(cls, mask, func, unit=""):
        return cls(mask, func(mask.centers()), unit)

    def inside(self) -> np.ndarray:
        return self.values[self.mask.inside]

    def positive_part(self) -> "ScalarField":
        return ScalarField(self.mask, np.maximum(self.values, 0.0), self.unit)

    def scaled(self, c) -> "ScalarField":
        return ScalarField(self.mask, c * self.values, self.unit)

    def __neg__(self):
        return self.scaled(-1.0)

    def at(self, x) -> float:
        return float(self.values[self.mask.cell_index(x)])

    def integral(self) -> float:
        return float(self.values.sum() * self.mask.cell_measure)

    def sup(self) -> float:
        return float(np.abs(self.inside()).max())


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Sparse matrix of div(A grad .) on the inside cells.

    ``neighbors``/``rates`` list, per inside cell, the inside neighbors and
    the corresponding off-diagonal entries (``-1`` pads unused slots).
    ``exit_rate`` is the total weight of faces leading outside.
    """

    mask: DomainMask
    matrix: sp.csr_matrix
    neighbors: np.ndarray
    rates: np.ndarray
    exit_rate: np.ndarray
    index: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return self.mask.h

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def apply(self, u: ScalarField) -> ScalarField:
        return ScalarField.from_inside(self.mask, self.matrix @ u.inside(), u.unit)

    def inner(self, u: ScalarField, v: ScalarField) -> float:
        return float(u.inside() @ v.inside()) * self.mask.cell_measure

    def with_potential(self, V) -> sp.csr_matrix:
        """Matrix of ``L + V`` for a potential given as field or inside vector."""
        vec = V.inside() if isinstance(V, ScalarField) else np.asarray(V)
        return (self.matrix + sp.diags(vec)).tocsr()


def assemble_operator(mask: DomainMask, A: CoefficientField | None = None) -> DiscreteOperator:
    """Assemble the two-point flux operator for div(A grad .).

    Raises
    ------
    EllipticityError
        When a cell violates the declared ellipticity bounds.
    """
    if A is None:
        A = CoefficientField.identity(mask)
    A.check(mask)
    n, h = mask.n, mask.h
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask.inside] = np.arange(mask.count)
    m = mask.count

    rows, cols, vals = [], [], []
    exit_rate = np.zeros(m)
    nbr = -np.ones((m, 2 * n), dtype=np.int64)
    rate = np.zeros((m, 2 * n))
    inside = np.pad(mask.inside, 1, constant_values=False)
    idx = np.pad(index, 1, constant_values=-1)
    coef = np.pad(A.diag, [(1, 1)] * n + [(0, 0)], mode="edge")

    for k in range(n):
        lo = tuple(slice(0, -1) if j == k else slice(None) for j in range(n))
        hi = tuple(slice(1, None) if j == k else slice(None) for j in range(n))
        ia, ib = inside[lo], inside[hi]
        a, b = coef[lo][..., k], coef[hi][..., k]
        xa, xb = idx[lo], idx[hi]

        both = ia & ib
        w = 2 * a[both] * b[both] / (a[both] + b[both]) / h**2
        pa, pb = xa[both], xb[both]
        rows += [pa, pb]
        cols += [pb, pa]
        vals += [w, w]
        nbr[pa, 2 * k + 1], rate[pa, 2 * k + 1] = pb, w
        nbr[pb, 2 * k], rate[pb, 2 * k] = pa, w

        # inside cell a, outside neighbour b (and the mirrored case)
        ea = ia & ~ib
        np.add.at(exit_rate, xa[ea], 2 * a[ea] / h**2)
        eb = ib & ~ia
        np.add.at(exit_rate, xb[eb], 2 * b[eb] / h**2)

    off_sum = rate.sum(axis=1)
    diag = -(off_sum + exit_rate)
    rows.append(np.arange(m))
    cols.append(np.arange(m))
    vals.append(diag)
    L = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    return DiscreteOperator(mask, L, nbr, rate, exit_rate, index)


def default_maxiter(size: int) -> int:
    return int(50 * np.sqrt(size)) + 10


def _cg(matrix, rhs, x0=None, tol=1e-10, maxiter=None):
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return np.zeros_like(rhs)
    maxiter = default_maxiter(len(rhs)) if maxiter is None else maxiter
    d = matrix.diagonal()
    M = sp.diags(1.0 / d)
    x, info = cg(matrix, rhs, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    res = np.linalg.norm(matrix @ x - rhs) / bnorm
    if info != 0 and res > tol * 10:
        raise SolverError("conjugate gradient did not converge", res)
    return x


def solve_shifted(op: DiscreteOperator, sigma: float, rhs: ScalarField, tol=1e-10, maxiter=None,
                  x0: ScalarField | None = None) -> ScalarField:
    """Solve ``(sigma I - L) x = rhs`` by preconditioned conjugate gradients."""
    if not sigma > 0:
        raise ValueError("shift must be positive for a definite system")
    mat = (sp.identity(op.size, format="csr") * sigma - op.matrix).tocsr()
    guess = None if x0 is None else x0.inside()
    x = _cg(mat, rhs.inside(), guess, tol, maxiter)
    return ScalarField.from_inside(op.mask, x, rhs.unit)


class ThetaStepper:
    """Repeated theta-scheme steps for dw/dt = (L + V) w on inside vectors."""

    def __init__(self, op: DiscreteOperator, V=None, theta=0.5, tol=1e-10):
        if not 0.5 <= theta <= 1.0:
            raise ValueError("theta must lie in [1/2, 1]")
        self.op = op
        self.theta = theta
        self.tol = tol
        if V is None:
            self.vmax = 0.0
            self.M = op.matrix
        else:
            vec = V.inside() if isinstance(V, ScalarField) else np.asarray(V, dtype=float)
            self.vmax = float(vec.max(initial=0.0))
            self.M = op.with_potential(vec)
        self._eye = sp.identity(op.size, format="csr")
        self._cache = {}

    def _system(self, dt, theta):
        key = (dt, theta)
        if key not in self._cache:
            sigma = 1.0 / (theta * dt)
            if self.vmax >= sigma:
                raise ValueError(
                    f"time step {dt:.3e} too large for potential max {self.vmax:.3e}"
                )
            self._cache = {key: (self._eye * sigma - self.M).tocsr()}
        return self._cache[key]

    def step(self, w, dt, theta=None):
        theta = self.theta if theta is None else theta
        if dt <= 0:
            raise ValueError("time step must be positive")
        mat = self._system(dt, theta)
        sigma = 1.0 / (theta * dt)
        rhs = sigma * w
        if theta < 1.0:
            rhs = rhs + (1.0 - theta) / theta * (self.M @ w)
        return _cg(mat, rhs, w, self.tol)


def step_parabolic(op: DiscreteOperator, V: ScalarField | None, state: ScalarField, dt: float,
                   theta: float = 0.5, tol: float = 1e-10) -> ScalarField:
    """One theta-scheme step of ``dw/dt = L w + V w``."""
    w = ThetaStepper(op, V, theta, tol).step(state.inside(), dt)
    return ScalarField.from_inside(op.mask, w, state.unit)
