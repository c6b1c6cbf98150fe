import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msscanet.exceptions import DataError
from msscanet.metrics import UndefinedCorrelation, average_ranks, linear_fit, plcc, srocc


def textbook_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))
    return num / den


def textbook_ranks(x):
    # rank of v = 1 + (#smaller) + (#equal - 1) / 2
    return [1 + sum(o < v for o in x) + (sum(o == v for o in x) - 1) / 2 for v in x]


def test_worked_pearson():
    assert plcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)


def test_worked_spearman():
    assert srocc([1, 2, 3], [3, 1, 2]) == pytest.approx(-0.5, abs=1e-15)


def test_ties_use_average_ranks():
    assert average_ranks([1, 1, 2]).tolist() == [1.5, 1.5, 3.0]
    assert srocc([1, 1, 2], [1, 2, 3]) == pytest.approx(
        textbook_pearson([1.5, 1.5, 3], [1, 2, 3]), abs=1e-15)


def test_linear_and_monotone_invariance():
    x = np.random.default_rng(0).normal(size=20)
    assert plcc(x, 2 * x + 1) == 1.0
    assert plcc(x, -x) == -1.0
    assert srocc(x, np.exp(x)) == 1.0


@pytest.mark.parametrize("fn", [plcc, srocc])
def test_constant_is_undefined(fn):
    with pytest.raises(UndefinedCorrelation):
        fn([1, 1, 1], [1, 2, 3])


def test_length_errors():
    with pytest.raises(DataError):
        plcc([1, 2, 3], [1, 2])
    with pytest.raises(DataError):
        plcc([1, 2], [1, 2])


@pytest.mark.parametrize("seed", range(100))
def test_against_textbook(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 40))
    # integer draws from a small range guarantee ties in most cases
    x = rng.integers(0, 6, size=n).astype(float) + (rng.normal(size=n) if seed % 2 else 0)
    y = rng.integers(0, 6, size=n).astype(float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    assert abs(plcc(x, y) - textbook_pearson(list(x), list(y))) < 1e-12
    assert abs(srocc(x, y) - textbook_pearson(textbook_ranks(list(x)),
                                              textbook_ranks(list(y)))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=30, unique=True),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_affine_invariance(xs, a, b):
    y = np.sin(np.arange(len(xs)))
    x = np.array(xs, dtype=float) / 7.0
    assert abs(plcc(a * x + b, y) - plcc(x, y)) < 1e-9
    assert srocc(a * x + b, y) == srocc(x, y)


def test_linear_fit():
    slope, intercept = linear_fit([1, 2, 3], [3, 5, 7])
    assert (slope, intercept) == pytest.approx((2.0, 1.0), abs=1e-15)
    assert linear_fit([2, 2, 2], [1, 2, 3]) == (0.0, 2.0)
