import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localfk.elliptic import ScalarField
from localfk.geometry import build_domain
from localfk.lorentz import distribution_function, evaluate_distribution, lorentz_norm, oneil_check

RECT = build_domain({"type": "box", "lower": [0, 0], "upper": [2, 1]}, 1 / 8)
SMALL = build_domain({"type": "box", "lower": [0, 0], "upper": [1, 1]}, 1 / 4)
CUBE = build_domain({"type": "box", "lower": [0, 0, 0], "upper": [1, 1, 1]}, 1 / 8)


def two_level():
    return ScalarField.from_function(RECT, lambda p: np.where(p[..., 0] < 1, 2.0, 1.0))


def test_indicator_distribution():
    f = ScalarField.constant(RECT, 1.0)
    levels, measures = distribution_function(f)
    assert evaluate_distribution(levels, measures, 0.5) == pytest.approx(2.0)
    assert evaluate_distribution(levels, measures, 1.0) == 0.0
    assert lorentz_norm(f, p=1.5).value == pytest.approx(2 ** (2 / 3))


def test_zero_field():
    levels, _ = distribution_function(ScalarField.zeros(RECT))
    assert levels.size == 0
    assert lorentz_norm(ScalarField.zeros(RECT)).value == 0.0


def test_two_level():
    f = two_level()
    levels, measures = distribution_function(f)
    assert list(levels) == [2.0, 1.0] and list(measures) == pytest.approx([1.0, 2.0])
    assert lorentz_norm(f, p=1.5, q=1).value == pytest.approx(2 ** (2 / 3) + 1, rel=1e-14)


def test_q_equals_p_is_lp(rng):
    f = ScalarField.from_inside(RECT, rng.standard_normal(RECT.count))
    lp = (np.sum(np.abs(f.inside()) ** 3) * RECT.cell_measure) ** (1 / 3)
    assert lorentz_norm(f, p=3, q=3).value == pytest.approx(lp, rel=1e-13)


def test_unsupported_q(rng):
    with pytest.raises(ValueError):
        lorentz_norm(two_level(), p=1.5, q=2)
    with pytest.raises(ValueError):
        lorentz_norm(two_level(), region=np.zeros(RECT.shape, bool))


@pytest.mark.parametrize("q", [1, math.inf, 1.5])
def test_homogeneity(rng, q):
    f = ScalarField.from_inside(RECT, rng.standard_normal(RECT.count))
    a = lorentz_norm(f, p=1.5, q=q).value
    assert lorentz_norm(f.scaled(-3.0), p=1.5, q=q).value == pytest.approx(3 * a, rel=1e-12)


def test_region_monotone_and_permutation(rng):
    vals = rng.standard_normal(RECT.count)
    f = ScalarField.from_inside(RECT, vals)
    small = RECT.centers()[..., 0] < 0.7
    big = RECT.centers()[..., 0] < 1.3
    assert lorentz_norm(f, small).value <= lorentz_norm(f, big).value <= lorentz_norm(f).value
    g = ScalarField.from_inside(RECT, rng.permutation(vals))
    for q in (1, math.inf, 1.5):
        assert lorentz_norm(g, q=q).value == pytest.approx(lorentz_norm(f, q=q).value, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=SMALL.count, max_size=SMALL.count),
       st.floats(1.0, 4.0))
def test_nesting(vals, p):
    # the q=1 space is the smallest only for p >= 1
    f = ScalarField.from_inside(SMALL, np.array(vals))
    weak = lorentz_norm(f, p=p, q=math.inf).value
    strong = lorentz_norm(f, p=p, q=p).value
    one = lorentz_norm(f, p=p, q=1).value
    assert weak <= strong * (1 + 1e-12) + 1e-300
    assert strong <= one * (1 + 1e-12) + 1e-300


def test_oneil_indicator():
    f = ScalarField.constant(CUBE, 1.0)
    assert oneil_check(f, f, 3) == pytest.approx(1.0, rel=1e-12)


def test_oneil_riesz_bounded(rng):
    # singularity on a cell vertex
    g = ScalarField(CUBE, 1 / np.linalg.norm(CUBE.centers() - 0.5, axis=-1))
    ratios = [oneil_check(ScalarField.from_inside(CUBE, rng.random(CUBE.count) ** 4), g, 3)
              for _ in range(50)]
    assert max(ratios) <= 1.0


def test_oneil_errors():
    with pytest.raises(ZeroDivisionError):
        oneil_check(ScalarField.zeros(CUBE), ScalarField.constant(CUBE, 1.0), 3)
    with pytest.raises(ValueError):
        oneil_check(ScalarField.constant(RECT, 1.0), ScalarField.constant(RECT, 1.0), 2)
