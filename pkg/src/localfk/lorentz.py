"""Lorentz norms of gridded fields.

Cells are atoms of measure h^n, so the distribution function of a field
restricted to a region is a step function and every norm below is a finite
sum over the sorted cell values. Normalization: the distribution-function
form ``||f||_{p,1} = int_0^inf mu(s)^(1/p) ds`` and
``||f||_{p,inf} = sup_s s mu(s)^(1/p)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .elliptic import ScalarField


@dataclass(frozen=True)
class RegionNorm:
    value: float
    p: float
    q: float
    cells: int
    region: str = "mask"


def _region_values(f: ScalarField, region) -> np.ndarray:
    sel = f.mask.inside if region is None else (np.asarray(region, dtype=bool) & f.mask.inside)
    if not sel.any():
        raise ValueError("region contains no cells")
    return np.abs(f.values[sel])


def distribution_function(f: ScalarField, region=None):
    """Levels and measures of ``s -> mu{|f| > s}``.

    Returns ``(levels, measures)`` with ``levels`` strictly decreasing;
    ``mu(s) = measures[k]`` for ``levels[k+1] <= s < levels[k]`` (with
    ``levels[K] = 0``) and ``mu(s) = 0`` for ``s >= levels[0]``.
    """
    vals = _region_values(f, region)
    vals = vals[vals > 0]
    if vals.size == 0:
        return np.array([]), np.array([])
    levels, counts = np.unique(vals, return_counts=True)
    levels, counts = levels[::-1], counts[::-1]
    return levels, np.cumsum(counts) * f.mask.cell_measure


def evaluate_distribution(levels, measures, s) -> float:
    k = int(np.searchsorted(-levels, -s, side="left"))  # number of levels > s
    return 0.0 if k == 0 else float(measures[k - 1])


def sorted_norm(desc: np.ndarray, cell: float, p: float, q: float) -> np.ndarray:
    """Lorentz norm of rows of nonnegative values sorted in decreasing order.

    Works on the last axis so that many regions can be evaluated at once.
    """
    m = desc.shape[-1]
    meas = (np.arange(1, m + 1) * cell) ** (1.0 / p)
    if q == 1:
        nxt = np.concatenate([desc[..., 1:], np.zeros(desc.shape[:-1] + (1,))], axis=-1)
        return np.sum((desc - nxt) * meas, axis=-1)
    if math.isinf(q):
        return np.max(desc * meas, axis=-1)
    if q == p:
        return (np.sum(desc**p, axis=-1) * cell) ** (1.0 / p)
    raise ValueError(f"unsupported secondary exponent q={q}")


def lorentz_norm(f: ScalarField, region=None, p: float = 1.5, q: float = 1.0,
                 label: str = "mask") -> RegionNorm:
    """Exact ``L^{p,q}`` norm of ``f`` on a cell region, for ``q`` in {1, inf, p}."""
    if not p > 0:
        raise ValueError("p must be positive")
    vals = _region_values(f, region)
    desc = np.sort(vals)[::-1]
    value = float(sorted_norm(desc, f.mask.cell_measure, p, q))
    return RegionNorm(value, float(p), float(q), int(vals.size), label)


def oneil_check(f: ScalarField, g: ScalarField, n: int) -> float:
    """``||fg||_1 / (||f||_{n/2,1} ||g||_{n/(n-2),inf})`` over the mask of ``f``."""
    if n < 3:
        raise ValueError("the weak-type exponent needs n >= 3")
    nf = lorentz_norm(f, p=n / 2, q=1).value
    ng = lorentz_norm(g, p=n / (n - 2), q=math.inf).value
    if nf == 0 or ng == 0:
        raise ZeroDivisionError("O'Neil ratio undefined for a vanishing factor")
    prod = float(np.sum(np.abs(f.values * g.values)) * f.mask.cell_measure)
    return prod / (nf * ng)
