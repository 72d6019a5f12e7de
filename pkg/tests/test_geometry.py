import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localfk.geometry import (
    BallSpec,
    DomainError,
    ball_intersection_fraction,
    boundary_faces,
    build_domain,
    distance_to_boundary,
    distances_to_boundary,
    inradius,
    load_mask,
    save_mask,
)

from conftest import DISK, LSHAPE, SQUARE


def test_unit_square_measure():
    m = build_domain(SQUARE, 1 / 64)
    assert abs(m.measure - 1.0) <= 1 / 64
    assert m.n == 2 and m.cell_measure == 1 / 64**2


def test_unit_disk_measure():
    m = build_domain(DISK, 1 / 128)
    assert abs(m.measure - math.pi) / math.pi < 0.02


def test_snake_inradius_matches_brute_force():
    m = build_domain({"type": "snake", "length": 8, "width": 1.0}, 1 / 32)
    r = inradius(m)
    assert abs(r - 0.5) <= 1 / 32
    # brute force over a thinned set of inside centers
    pts = m.inside_centers()[::97]
    assert distances_to_boundary(m, pts).max() <= r + 1e-12


def test_empty_rasterization_raises():
    with pytest.raises(DomainError):
        build_domain({"type": "disk", "center": [0.05, 0.05], "radius": 0.01}, 0.5)
    with pytest.raises(DomainError):
        build_domain({"type": "triangle"}, 0.1)


def test_rasterization_is_deterministic():
    a = build_domain(LSHAPE, 1 / 32)
    b = build_domain(LSHAPE, 1 / 32)
    assert np.array_equal(a.inside, b.inside) and a.origin == b.origin


def test_distance_square_center_and_disk():
    sq = build_domain(SQUARE, 1 / 32)
    x = sq.center_of(sq.cell_index([0.5, 0.5]))
    assert abs(distance_to_boundary(sq, x) - 0.5) <= 1 / 32
    dk = build_domain(DISK, 1 / 64)
    assert abs(distance_to_boundary(dk, [0.3, 0.0]) - 0.7) <= 1 / 64


def test_distance_outside_raises():
    sq = build_domain(SQUARE, 1 / 16)
    with pytest.raises(DomainError):
        distance_to_boundary(sq, [1.5, 0.5])


def test_distance_near_reentrant_corner():
    m = build_domain(LSHAPE, 1 / 32)
    x = np.array([0.45, 0.45])
    faces, axes = boundary_faces(m)
    # brute force: nearest point on each face square
    best = np.inf
    for f, k in zip(faces, axes):
        lo, hi = f - 1 / 64, f + 1 / 64
        lo[k] = hi[k] = f[k]
        best = min(best, np.linalg.norm(np.clip(x, lo, hi) - x))
    assert math.isclose(distance_to_boundary(m, x), best, rel_tol=1e-12)
    assert abs(best - math.hypot(0.05, 0.05)) <= 1 / 32


def test_ball_fractions():
    big = build_domain({"type": "box", "lower": [-2, -2], "upper": [2, 2]}, 1 / 64)
    assert abs(ball_intersection_fraction(big, BallSpec((0, 0), 0.5)) - 1) < 0.02
    assert abs(ball_intersection_fraction(big, BallSpec((2, 0), 0.5)) - 0.5) < 0.02
    assert abs(ball_intersection_fraction(big, BallSpec((2, 2), 0.5)) - 0.25) < 0.02
    with pytest.raises(DomainError):
        ball_intersection_fraction(big, BallSpec((0, 0), 1 / 128))


def test_ball_spec_validates():
    with pytest.raises(DomainError):
        BallSpec((0, 0), 0.0)
    assert math.isclose(BallSpec((0, 0, 0), 1.0).volume, 4 * math.pi / 3)


def test_measure_refinement_converges():
    ms = [build_domain(DISK, h).measure for h in (1 / 16, 1 / 32, 1 / 64)]
    assert abs(ms[2] - ms[1]) <= 8 * (1 / 32)
    assert abs(ms[1] - math.pi) < abs(ms[0] - math.pi) + 1e-12


@settings(max_examples=20, deadline=None)
@given(r1=st.floats(0.3, 0.8), k=st.integers(0, 12))
def test_monotone_in_domain(r1, k):
    # radius steps of whole cells keep both grids on one lattice
    h = 1 / 32
    small = build_domain({"type": "disk", "center": [0, 0], "radius": r1}, h)
    big = build_domain({"type": "disk", "center": [0, 0], "radius": r1 + k * h}, h)
    assert big.measure >= small.measure
    ball = BallSpec((0.0, r1), 0.25)
    assert ball_intersection_fraction(big, ball) >= ball_intersection_fraction(small, ball)


def test_distance_bounded_by_bbox_inradius():
    m = build_domain(LSHAPE, 1 / 16)
    d = distances_to_boundary(m, m.inside_centers())
    assert d.max() <= 0.5 + 1e-12


def test_union_and_difference():
    u = build_domain({"type": "union", "parts": [SQUARE, {"type": "box", "lower": [1, 0], "upper": [2, 1]}]}, 1 / 16)
    assert math.isclose(u.measure, 2.0)
    d = build_domain({"type": "difference", "base": SQUARE,
                      "minus": [{"type": "box", "lower": [0, 0], "upper": [0.5, 0.5]}]}, 1 / 16)
    assert math.isclose(d.measure, 0.75)


def test_mask_roundtrip(tmp_path):
    m = build_domain(LSHAPE, 1 / 16)
    save_mask(m, tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw.split(b"\n", 1)[0].startswith(b'{"n": 2')
    back = load_mask(tmp_path / "m.bin")
    assert np.array_equal(back.inside, m.inside) and back.h == m.h and back.origin == m.origin
