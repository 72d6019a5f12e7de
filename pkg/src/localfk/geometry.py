"""Raster domains on uniform Cartesian grids.

A domain is stored as a boolean array of cells; a cell belongs to the domain
when its center lies in the (open) set described by a domain descriptor.
Outside cells carry the Dirichlet zero, and the boundary is the set of faces
between inside and outside cells.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import gamma


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DomainMask:
    inside: np.ndarray
    h: float
    origin: tuple

    def __post_init__(self):
        inside = np.ascontiguousarray(self.inside, dtype=bool)
        if inside.ndim not in (1, 2, 3):
            raise DomainError(f"unsupported dimension {inside.ndim}")
        if self.h <= 0:
            raise DomainError("cell width must be positive")
        if len(self.origin) != inside.ndim:
            raise DomainError("origin does not match the grid dimension")
        if not inside.any():
            raise DomainError("domain rasterizes to an empty set; decrease h")
        inside.setflags(write=False)
        object.__setattr__(self, "inside", inside)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n(self) -> int:
        return self.inside.ndim

    @property
    def shape(self) -> tuple:
        return self.inside.shape

    @property
    def cell_measure(self) -> float:
        return self.h ** self.n

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    @property
    def measure(self) -> float:
        return self.count * self.cell_measure

    def axes(self):
        return [self.origin[k] + self.h * np.arange(self.shape[k]) for k in range(self.n)]

    def centers(self) -> np.ndarray:
        """Coordinates of all cell centers, shape ``(*shape, n)``."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def inside_centers(self) -> np.ndarray:
        return self.centers()[self.inside]

    def cell_index(self, x) -> tuple:
        """Grid index of the cell containing ``x`` (nearest center)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.n:
            raise DomainError(f"point has {x.size} coordinates, domain has {self.n}")
        idx = np.floor((x - np.asarray(self.origin)) / self.h + 0.5).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            raise DomainError(f"point {tuple(x)} lies outside the grid")
        return tuple(int(i) for i in idx)

    def center_of(self, index) -> np.ndarray:
        return np.asarray(self.origin) + self.h * np.asarray(index, dtype=float)

    def contains(self, x) -> bool:
        try:
            return bool(self.inside[self.cell_index(x)])
        except DomainError:
            return False

    def header(self) -> dict:
        return {"n": self.n, "dims": list(self.shape), "h": self.h, "origin": list(self.origin)}


@dataclass(frozen=True)
class BallSpec:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("ball radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def n(self) -> int:
        return len(self.center)

    @property
    def volume(self) -> float:
        return unit_ball_volume(self.n) * self.radius ** self.n


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / gamma(n / 2 + 1)


# --- descriptors -----------------------------------------------------------
#
# Each primitive maps to (lower, upper, predicate). Predicates act on an array
# of points with shape (..., n) and implement open-set membership.


def _box(desc):
    lower = np.asarray(desc["lower"], dtype=float)
    upper = np.asarray(desc["upper"], dtype=float)
    if lower.shape != upper.shape or np.any(upper <= lower):
        raise DomainError("box needs lower < upper in every coordinate")

    def pred(p):
        return np.all((p > lower) & (p < upper), axis=-1)

    return lower, upper, pred


def _ball(desc):
    center = np.asarray(desc["center"], dtype=float)
    radius = float(desc["radius"])
    if radius <= 0:
        raise DomainError("ball radius must be positive")

    def pred(p):
        return np.sum((p - center) ** 2, axis=-1) < radius**2

    return center - radius, center + radius, pred


def _lshape(desc):
    # [0,s]^2 with the upper right quadrant removed; reentrant corner at (s/2, s/2)
    s = float(desc.get("size", 1.0))
    corner = np.asarray(desc.get("corner", (0.0, 0.0)), dtype=float)
    lower, upper = corner, corner + s

    def pred(p):
        q = p - corner
        in_square = np.all((q > 0) & (q < s), axis=-1)
        notch = np.all(q >= s / 2, axis=-1)
        return in_square & ~notch

    return lower, upper, pred


def _snake(desc):
    # tube of the given width around y = a*sin(2*pi*x/P), x in [0, length], rounded ends
    length = float(desc["length"])
    width = float(desc["width"])
    amp = float(desc.get("amplitude", 0.5))
    period = float(desc.get("period", length / 2))
    half = width / 2
    m = max(int(math.ceil(length / (width / 64))), 16)
    xs = np.linspace(0.0, length, m + 1)
    curve = np.stack([xs, amp * np.sin(2 * np.pi * xs / period)], axis=-1)

    def pred(p):
        from scipy.spatial import cKDTree

        flat = p.reshape(-1, 2)
        dist, _ = cKDTree(curve).query(flat)
        return (dist < half).reshape(p.shape[:-1])

    lower = np.array([-half, -abs(amp) - half])
    upper = np.array([length + half, abs(amp) + half])
    return lower, upper, pred


def _union(desc):
    parts = [_primitive(d) for d in desc["parts"]]
    if not parts:
        raise DomainError("union needs at least one part")

    def pred(p):
        out = np.zeros(p.shape[:-1], dtype=bool)
        for _, _, f in parts:
            out |= f(p)
        return out

    lower = np.min([lo for lo, _, _ in parts], axis=0)
    upper = np.max([up for _, up, _ in parts], axis=0)
    return lower, upper, pred


def _difference(desc):
    lower, upper, base = _primitive(desc["base"])
    cuts = [_primitive(d)[2] for d in desc.get("minus", [])]

    def pred(p):
        out = base(p)
        for f in cuts:
            out &= ~f(p)
        return out

    return lower, upper, pred


_PRIMITIVES = {
    "box": _box,
    "interval": _box,
    "ball": _ball,
    "disk": _ball,
    "lshape": _lshape,
    "snake": _snake,
    "union": _union,
    "difference": _difference,
}


def _primitive(desc):
    kind = desc.get("type")
    if kind not in _PRIMITIVES:
        raise DomainError(f"unknown domain type {kind!r}")
    return _PRIMITIVES[kind](desc)


def build_domain(desc: dict, h: float) -> DomainMask:
    """Rasterize a domain descriptor with cell-center sampling.

    The grid is aligned so that the lower corner of the bounding box is a
    cell face; boxes whose sides are multiples of ``h`` are represented
    exactly. One ring of outside cells surrounds the bounding box.

    Raises
    ------
    DomainError
        If the descriptor is malformed or no cell center falls inside.
    """
    if not h > 0:
        raise DomainError("cell width must be positive")
    lower, upper, pred = _primitive(desc)
    extent = upper - lower
    cells = np.ceil(np.round(extent / h, 9)).astype(int)
    shape = tuple(int(c) + 2 for c in cells)
    origin = tuple(lower + h / 2 - h)
    axes = [origin[k] + h * np.arange(shape[k]) for k in range(len(shape))]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inside = pred(pts)
    if not inside.any():
        raise DomainError(f"domain {desc.get('type')!r} is empty at h={h}")
    return DomainMask(inside, float(h), origin)


def boundary_faces(mask: DomainMask):
    """Faces separating inside cells from outside cells.

    Returns ``(centers, axis)``: the coordinates of each face center and the
    axis normal to it.
    """
    inside = np.pad(mask.inside, 1, constant_values=False)
    origin = np.asarray(mask.origin) - mask.h
    centers, axes = [], []
    for k in range(mask.n):
        a = np.take(inside, np.arange(inside.shape[k] - 1), axis=k)
        b = np.take(inside, np.arange(1, inside.shape[k]), axis=k)
        idx = np.argwhere(a != b).astype(float)
        c = origin + mask.h * idx
        c[:, k] += mask.h / 2
        centers.append(c)
        axes.append(np.full(len(c), k))
    return np.concatenate(centers), np.concatenate(axes)


def _face_distances(points, faces, axes, h):
    # exact distance from points (P, n) to axis-aligned faces (F, n) of side h
    diff = np.abs(points[:, None, :] - faces[None, :, :])
    n = faces.shape[1]
    normal = np.zeros((len(faces), n), dtype=bool)
    normal[np.arange(len(faces)), axes] = True
    tang = np.maximum(diff - h / 2, 0.0)
    d = np.where(normal[None], diff, tang)
    return np.sqrt(np.sum(d * d, axis=-1))


def distance_to_boundary(mask: DomainMask, x) -> float:
    """Euclidean distance from ``x`` to the nearest boundary face."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if not mask.contains(x):
        raise DomainError(f"point {tuple(x)} is not inside the domain")
    faces, axes = boundary_faces(mask)
    return float(_face_distances(x[None, :], faces, axes, mask.h).min())


def distances_to_boundary(mask: DomainMask, points, chunk: int = 256) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    faces, axes = boundary_faces(mask)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        out[s : s + chunk] = _face_distances(points[s : s + chunk], faces, axes, mask.h).min(axis=1)
    return out


def inradius(mask: DomainMask) -> float:
    """Largest distance from an inside cell center to the boundary.

    Uses the Euclidean distance transform to outside cell centers; the
    nearest face lies half a cell closer.
    """
    edt = ndimage.distance_transform_edt(np.pad(mask.inside, 1), sampling=mask.h)
    return float(edt.max() - mask.h / 2)


def ball_cells(mask: DomainMask, ball: BallSpec) -> np.ndarray:
    """Boolean array of inside cells whose centers lie in the closed ball."""
    c = np.asarray(ball.center)
    d2 = np.zeros(mask.shape)
    for k, ax in enumerate(mask.axes()):
        shape = [1] * mask.n
        shape[k] = -1
        d2 = d2 + ((ax - c[k]) ** 2).reshape(shape)
    return mask.inside & (d2 <= ball.radius**2 * (1 + 1e-12))


def ball_intersection_fraction(mask: DomainMask, ball: BallSpec) -> float:
    if ball.radius < mask.h:
        raise DomainError("ball radius must be at least one cell width")
    return float(ball_cells(mask, ball).sum() * mask.cell_measure / ball.volume)


def save_mask(mask: DomainMask, path) -> None:
    """Write a JSON header line followed by row-major 0/1 bytes."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(json.dumps(mask.header()).encode() + b"\n")
        fh.write(mask.inside.astype(np.uint8).tobytes(order="C"))


def load_mask(path) -> DomainMask:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    meta = json.loads(head)
    inside = np.frombuffer(body, dtype=np.uint8).reshape(meta["dims"]).astype(bool)
    if inside.ndim != meta["n"]:
        raise DomainError("mask header dimension mismatch")
    return DomainMask(inside, float(meta["h"]), tuple(meta["origin"]))
