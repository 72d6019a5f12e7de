"""Time-integrated Gaussian kernels and empirical convolution constants.

Everything here uses the Gaussian majorant ``c1 s^(-n/2) exp(-|x|^2/(c2 s))``.
For the identity coefficient the heat kernel itself has this form with
``c1 = (4 pi)^(-n/2)`` and ``c2 = 4``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage
from scipy.integrate import nquad, quad
from scipy.signal import fftconvolve
from scipy.special import erfc, gamma

from .elliptic import ScalarField
from .geometry import unit_ball_volume
from .lorentz import sorted_norm


@dataclass(frozen=True)
class KernelConstants:
    c1: float
    c2: float
    n: int

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("kernel constants must be positive")
        if self.n < 1:
            raise ValueError("dimension must be positive")

    @classmethod
    def exact(cls, n: int) -> "KernelConstants":
        """Heat kernel of the Laplacian in ``R^n``."""
        return cls((4 * math.pi) ** (-n / 2), 4.0, n)

    def density(self, s, r):
        s = np.asarray(s, dtype=float)
        return self.c1 * s ** (-self.n / 2) * np.exp(-np.asarray(r) ** 2 / (self.c2 * s))


def upper_gamma(s: float, a):
    """Upper incomplete gamma ``Gamma(s, a)`` for half-integer or integer ``s > 0``.

    Built from ``Gamma(1/2, a) = sqrt(pi) erfc(sqrt(a))`` or ``Gamma(1, a) = e^-a``
    and the recursion ``Gamma(s+1, a) = s Gamma(s, a) + a^s e^-a``.
    """
    a = np.asarray(a, dtype=float)
    twice = round(2 * s)
    if twice < 1 or abs(2 * s - twice) > 1e-12:
        raise ValueError("s must be a positive integer or half-integer")
    if twice % 2:
        cur, val = 0.5, math.sqrt(math.pi) * erfc(np.sqrt(a))
    else:
        cur, val = 1.0, np.exp(-a)
    while cur < s - 1e-12:
        val = cur * val + a**cur * np.exp(-a)
        cur += 1.0
    return val


def _quad_s(r, d, k):
    # direct integration in the time variable; peak of the integrand at 2r^2/(n c2)
    peak = 2 * r * r / (k.n * k.c2)
    pts = [peak] if 0 < peak < d else None
    val, _ = quad(lambda s: float(k.density(s, r)), 0.0, d, points=pts, epsabs=0.0,
                  epsrel=1e-12, limit=400)
    return val


def _quad_y(r, d, k):
    # substituted form c1 (c2/r^2)^(n/2-1) int_a^inf y^(n/2-2) e^-y dy
    a = r * r / (k.c2 * d)
    e = k.n / 2 - 2
    tail, _ = quad(lambda y: y**e * math.exp(-y), a, np.inf, epsabs=0.0, epsrel=1e-12, limit=400)
    return k.c1 * (k.c2 / (r * r)) ** (k.n / 2 - 1) * tail


def time_integrated_gaussian(r, d: float, k: KernelConstants, method: str = "auto"):
    """``int_0^d c1 s^(-n/2) exp(-r^2/(c2 s)) ds``.

    ``method="auto"`` uses the incomplete-gamma closed form for ``n >= 3``
    and quadrature for ``n <= 2``; ``method="quad"`` integrates directly in
    ``s`` and serves as an independent check. Vectorized over ``r`` for the
    closed form.
    """
    if not d > 0:
        raise ValueError("time budget must be positive")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0):
        raise ValueError("r must be positive")
    if method == "quad" or (method == "auto" and k.n <= 2):
        fn = _quad_s if method == "quad" else _quad_y
        out = np.vectorize(lambda x: fn(float(x), d, k), otypes=[float])(r_arr)
        return float(out) if out.ndim == 0 else out
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    s = k.n / 2 - 1
    a = r_arr**2 / (k.c2 * d)
    out = k.c1 * (k.c2 / r_arr**2) ** s * upper_gamma(s, a)
    return float(out) if out.ndim == 0 else out


def gauss_polynomial(n: int) -> np.ndarray:
    """Coefficients (ascending) of the polynomial ``q`` used for ``n >= 5``.

    With ``k = ceil((n-4)/2)``, ``y^(n/2-2) <= 1 + y^k`` and unrolling the
    integration by parts ``int_a^inf y^k e^-y = a^k e^-a + k int_a^inf y^(k-1) e^-y``
    gives ``q(a) = 1 + sum_j k!/j! a^j``.
    """
    if n < 5:
        return np.array([1.0])
    k = math.ceil((n - 4) / 2)
    coef = np.array([math.factorial(k) / math.factorial(j) for j in range(k + 1)])
    coef[0] += 1.0
    return coef


def lemma_gauss_bound(r, d: float, k: KernelConstants):
    """Majorant of the time-integrated Gaussian, up to a constant depending on n, c1, c2."""
    r = np.asarray(r, dtype=float)
    a = r**2 / (k.c2 * d)
    if k.n == 2:
        with np.errstate(divide="ignore"):
            out = (1 + np.maximum(0.0, -np.log(a))) * np.exp(-a)
    elif k.n in (3, 4):
        out = r ** (2 - k.n) * np.exp(-a)
    elif k.n >= 5:
        out = r ** (2 - k.n) * np.polynomial.polynomial.polyval(a, gauss_polynomial(k.n)) * np.exp(-a)
    else:
        raise ValueError("bound is stated for n >= 2")
    return float(out) if out.ndim == 0 else out


def lemma_gauss_sweep(dims=(2, 3, 4, 5, 7), a_range=(1e-3, 20.0), points: int = 40):
    """Quadrature versus majorant on a log grid of ``a = r^2/(c2 d)`` (``r = 1``).

    Returns rows ``(n, a, quadrature, bound, ratio)`` in input order.
    """
    rows = []
    for n in dims:
        k = KernelConstants.exact(n)
        for a in np.geomspace(*a_range, points):
            d = 1.0 / (k.c2 * a)
            val = time_integrated_gaussian(1.0, d, k, method="quad")
            bnd = lemma_gauss_bound(1.0, d, k)
            rows.append((int(n), float(a), float(val), float(bnd), float(val / bnd)))
    return rows


def sweep_constants(rows) -> dict:
    """Largest quadrature/bound ratio per dimension."""
    out = {}
    for n, _, _, _, ratio in rows:
        out[n] = max(out.get(n, 0.0), ratio)
    return out


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "a", "quadrature", "bound", "ratio"])
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# --- grid convolutions -----------------------------------------------------


@lru_cache(maxsize=None)
def riesz_cell_integral(n: int) -> float:
    """``int_{[-1/2,1/2]^n} |z|^(2-n) dz`` for ``n >= 3``.

    Writing ``|z|^(2-n)`` as a Laplacian and applying the divergence theorem
    turns it into a smooth integral over one face:
    ``(n/2) int_{[-1/2,1/2]^(n-1)} (1/4 + |w|^2)^((2-n)/2) dw``.
    """
    if n < 3:
        raise ValueError("needs n >= 3")
    f = lambda *w: (0.25 + sum(x * x for x in w)) ** ((2 - n) / 2)
    val, _ = nquad(f, [(-0.5, 0.5)] * (n - 1), opts={"epsabs": 0.0, "epsrel": 1e-10})
    return n / 2 * val


def _log_rect_antiderivative(x, y):
    # F with d2F/dxdy = log(x^2 + y^2)
    r2 = x * x + y * y
    safe = np.where(r2 > 0, r2, 1.0)
    xs = np.where(x != 0, x, 1.0)
    ys = np.where(y != 0, y, 1.0)
    return (np.where(r2 > 0, x * y * np.log(safe), 0.0) - 3 * x * y
            + np.where(x != 0, x * x * np.arctan(y / xs), 0.0)
            + np.where(y != 0, y * y * np.arctan(x / ys), 0.0))


def log_rect_integral(x1, x2, y1, y2):
    """Exact ``int int log(x^2 + y^2)`` over ``[x1,x2] x [y1,y2]``."""
    F = _log_rect_antiderivative
    return F(x2, y2) - F(x1, y2) - F(x2, y1) + F(x1, y1)


def _log_cell_weights(rel, h, d, near=2.5):
    """Integral of ``log(d^2/|y|^2)`` over the cells centred at ``rel`` (shape (..., 2))."""
    r2 = np.sum(rel**2, axis=-1)
    with np.errstate(divide="ignore"):
        w = h * h * (math.log(d * d) - np.log(np.where(r2 > 0, r2, 1.0)))
    close = np.max(np.abs(rel), axis=-1) <= near * h
    if np.any(close):
        c = rel[close]
        exact = log_rect_integral(c[:, 0] - h / 2, c[:, 0] + h / 2, c[:, 1] - h / 2, c[:, 1] + h / 2)
        w[close] = h * h * math.log(d * d) - exact
    return w


def _offsets(n, R, h):
    grids = np.meshgrid(*[np.arange(-R, R + 1)] * n, indexing="ij")
    return np.stack(grids, axis=-1) * h


def _riesz_kernel(n, h, d, k, cut=6.0):
    R = int(math.ceil(cut * d / h))
    z = _offsets(n, R, h)
    r = np.linalg.norm(z, axis=-1)
    K = np.zeros(r.shape)
    pos = r > 0
    K[pos] = time_integrated_gaussian(r[pos], d * d, k)
    s = n / 2 - 1
    K[(R,) * n] = k.c1 * k.c2**s * gamma(s) * h**2 * riesz_cell_integral(n) / h**n
    return K * h**n, R


def _log_grid_weights(h, d, R, near=2):
    # log(d^2/|y|^2) cell integrals on offsets [-R, R]^2, exact within `near` cells
    ax = h * np.arange(-R, R + 1)
    r2 = ax[:, None] ** 2 + ax[None, :] ** 2
    r2[R, R] = 1.0
    w = h * h * (math.log(d * d) - np.log(r2))
    r2[R, R] = 0.0
    m = min(near, R)
    sl = slice(R - m, R + m + 1)
    z = np.stack(np.meshgrid(ax[sl], ax[sl], indexing="ij"), axis=-1)
    w[sl, sl] = _log_cell_weights(z, h, d, near=np.inf)
    return w, r2


def _log_kernel(h, d):
    R = int(math.ceil(d / h))
    w, r2 = _log_grid_weights(h, d, R)
    return np.where(r2 <= d * d * (1 + 1e-12), w, 0.0), R


def _lemma7_kernel(h, d, cut=6.0):
    R = int(math.ceil(cut * d / h))
    w, r2 = _log_grid_weights(h, d, R)
    logw = np.where(r2 <= d * d * (1 + 1e-12), w, 0.0)
    return (h * h + logw) * np.exp(-r2 / (d * d)), R


def _convolve(values, kernel, R):
    # full convolution: output index i corresponds to grid index i - R
    return fftconvolve(values, kernel, mode="full")


def _candidates(values, R, h, reach):
    support = np.pad(values > 0, R)
    if not support.any():
        return support
    dist = ndimage.distance_transform_edt(~support, sampling=h)
    return dist <= reach + 1e-12 * h


@dataclass(frozen=True)
class ConvolutionSup:
    value: float
    center: tuple


def _sup(out, cand, origin, h, R) -> ConvolutionSup:
    vals = np.where(cand, out, -np.inf)
    idx = np.unravel_index(int(np.argmax(vals)), vals.shape)
    center = tuple(float(o + h * (i - R)) for o, i in zip(origin, idx))
    return ConvolutionSup(float(vals[idx]), center)


def _nonneg(f: ScalarField) -> np.ndarray:
    if np.any(f.values < 0):
        raise ValueError("field must be nonnegative")
    return np.asarray(f.values, dtype=float)


def riesz_sup(f: ScalarField, d: float, k: KernelConstants | None = None) -> ConvolutionSup:
    """``sup_x int f(y) int_0^{d^2} p_s(x, y) ds dy`` over grid points near the support."""
    mask = f.mask
    k = KernelConstants.exact(mask.n) if k is None else k
    K, R = _riesz_kernel(mask.n, mask.h, d, k)
    out = _convolve(_nonneg(f), K, R)
    return _sup(out, _candidates(f.values, R, mask.h, 2 * d), mask.origin, mask.h, R)


def best_ball_lorentz(values: np.ndarray, h: float, radius: float, p: float, q: float = 1.0,
                      candidates: np.ndarray | None = None, chunk_values: int = 4_000_000):
    """Exhaustive scan of ``||f||_{L^{p,q}(B(c, radius))}`` over cell centers ``c``.

    ``values`` is a full grid of nonnegative numbers. Candidate centers are
    grid cells (padded by the ball radius), by default every cell within
    ``radius`` of the support. Returns ``(value, index)`` with the index in
    padded coordinates and the pad width.
    """
    n = values.ndim
    R = int(math.floor(radius / h + 1e-9))
    off = _offsets(n, R, 1.0).reshape(-1, n).astype(int)
    off = off[np.sum((off * h) ** 2, axis=1) <= radius**2 * (1 + 1e-12)]
    # candidates live on the grid padded by R; their balls reach R further
    padded = np.pad(values, 2 * R)
    if candidates is None:
        candidates = _candidates(values, R, h, radius)
    centers = np.argwhere(candidates)
    if centers.size == 0:
        return 0.0, (R,) * n, R
    flat = np.ravel_multi_index(tuple((centers + R).T), padded.shape)
    shift = np.ravel_multi_index(tuple((off + R).T), padded.shape) - np.ravel_multi_index((R,) * n, padded.shape)
    src = padded.ravel()
    step = max(1, chunk_values // len(off))
    best, arg = -1.0, 0
    for s in range(0, len(flat), step):
        vals = src[flat[s : s + step, None] + shift[None, :]]
        vals = -np.sort(-vals, axis=1)
        norms = sorted_norm(vals, h**n, p, q)
        j = int(np.argmax(norms))
        if norms[j] > best:
            best, arg = float(norms[j]), s + j
    return best, tuple(int(i) for i in centers[arg]), R


@dataclass(frozen=True)
class LemmaRatio:
    ratio: float
    numerator: float
    denominator: float
    x_star: tuple
    ball_center: tuple


def lemma_est_ratio(f: ScalarField, d: float, k: KernelConstants | None = None) -> LemmaRatio:
    """Empirical constant of the Riesz-potential bound by local ``L^{n/2,1}`` norms.

    Numerator: the sup over grid points within ``2d`` of the support of
    ``f`` of its convolution with the time-integrated kernel up to ``d^2``.
    Denominator: the largest ``L^{n/2,1}`` norm over balls of volume ``d^n``.

    Raises
    ------
    ZeroDivisionError
        If ``f`` vanishes.
    """
    mask = f.mask
    if mask.n < 3:
        raise ValueError("needs n >= 3")
    if d < 2 * mask.h:
        raise ValueError("d must be at least two cells")
    num = riesz_sup(f, d, k)
    rho = d / unit_ball_volume(mask.n) ** (1 / mask.n)
    den, idx, R = best_ball_lorentz(_nonneg(f), mask.h, rho, mask.n / 2, 1.0)
    if den == 0:
        raise ZeroDivisionError("field vanishes; ratio undefined")
    center = tuple(float(o + mask.h * (i - R)) for o, i in zip(mask.origin, idx))
    return LemmaRatio(num.value / den, num.value, den, num.center, center)


def log_kernel_convolution(f: ScalarField, x, d: float) -> float:
    """``int_{|y|<=d} f(x - y) log(d^2/|y|^2) dy`` as a cell sum.

    Cells near the singularity are integrated exactly over their squares.
    """
    mask = f.mask
    if mask.n != 2:
        raise ValueError("log kernel is two-dimensional")
    if d < 2 * mask.h:
        raise ValueError("d must be at least two cells")
    x = np.asarray(x, dtype=float)
    vals = _nonneg(f)
    sel = vals > 0
    if not sel.any():
        return 0.0
    rel = mask.centers()[sel] - x
    inb = np.sum(rel**2, axis=-1) <= d * d * (1 + 1e-12)
    w = _log_cell_weights(rel[inb], mask.h, d)
    return float(np.sum(vals[sel][inb] * w))


def log_kernel_sup(f: ScalarField, d: float, reach: float | None = None) -> ConvolutionSup:
    """Sup of ``log_kernel_convolution`` over cell centers within ``reach`` of the support."""
    mask = f.mask
    K, R = _log_kernel(mask.h, d)
    out = _convolve(_nonneg(f), K, R)
    reach = 2 * d if reach is None else reach
    return _sup(out, _candidates(f.values, R, mask.h, reach), mask.origin, mask.h, R)


def lemma_final_ratio(f: ScalarField, d: float) -> LemmaRatio:
    """Empirical constant comparing the Gaussian-damped log kernel with the truncated one."""
    mask = f.mask
    if mask.n != 2:
        raise ValueError("needs n = 2")
    if d < 2 * mask.h:
        raise ValueError("d must be at least two cells")
    vals = _nonneg(f)
    K, R = _lemma7_kernel(mask.h, d)
    cand = _candidates(vals, R, mask.h, 2 * d)
    num = _sup(_convolve(vals, K, R), cand, mask.origin, mask.h, R)
    den = log_kernel_sup(f, d)
    if den.value <= 0:
        raise ZeroDivisionError("field vanishes; ratio undefined")
    return LemmaRatio(num.value / den.value, num.value, den.value, num.center, den.center)


def random_field(mask, rng: np.random.Generator, bumps: int = 3) -> ScalarField:
    """Nonnegative field built from a few random ball indicators and a smooth bump."""
    c = mask.centers()
    lo = np.asarray(mask.origin) + mask.h
    span = mask.h * (np.asarray(mask.shape) - 2)
    vals = np.zeros(mask.shape)
    for _ in range(bumps):
        ctr = lo + span * rng.uniform(0.2, 0.8, mask.n)
        rad = span.min() * rng.uniform(0.05, 0.3)
        height = rng.uniform(0.5, 2.0)
        if rng.random() < 0.5:
            vals += height * (np.sum((c - ctr) ** 2, axis=-1) < rad**2)
        else:
            vals += height * np.exp(-np.sum((c - ctr) ** 2, axis=-1) / rad**2)
    return ScalarField(mask, vals)
