"""Tests for generalized binomial coefficients and the binomial sandwich."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.combinatorics_service.binomial import (
    binom_order,
    binom_sandwich,
    gen_binom,
    log_binom_sandwich,
    split_index,
)
from backend.shared.exceptions import DomainError


@pytest.mark.parametrize(
    "p, k, expected",
    [(3.0, 2, 3.0), (2.5, 1, 2.5), (2.5, 3, 0.3125), (4.2, 0, 1.0)],
)
def test_gen_binom(p, k, expected):
    assert gen_binom(p, k) == pytest.approx(expected, rel=1e-15)


def test_gen_binom_negative_index():
    with pytest.raises(DomainError):
        gen_binom(2.0, -1)


@pytest.mark.parametrize("p, k_p", [(1.5, 1), (2.0, 1), (3.0, 2), (4.9, 2), (5.0, 3)])
def test_split_index(p, k_p):
    assert split_index(p) == k_p
    assert binom_order(p).k_p == k_p


def test_binom_order_rejects_low_order():
    with pytest.raises(ValueError):
        binom_order(1.0)


@pytest.mark.parametrize(
    "p, expected",
    [
        (3.0, (6.0, 6.0, 12.0)),
        (2.0, (0.0, 2.0, 4.0)),
        (2.5, (0.0, 2.0**2.5 - 2.0, 5.0)),
    ],
)
def test_sandwich_at_unit_arguments(p, expected):
    bounds = binom_sandwich(p, 1.0, 1.0)
    assert (bounds.lower, bounds.middle, bounds.upper) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("x, y", [(0.0, 1.0), (1.0, -2.0)])
def test_sandwich_needs_positive_arguments(x, y):
    with pytest.raises(DomainError):
        binom_sandwich(2.5, x, y)


def test_sandwich_needs_order_above_one():
    with pytest.raises(DomainError):
        binom_sandwich(1.0, 1.0, 1.0)


def test_sandwich_in_log_space():
    bounds = binom_sandwich(3.0, 1e-101, 1e-101)
    # (x+y)^3 - x^3 - y^3 = 3xy(x+y)
    assert math.isclose(bounds.middle, 6e-303, rel_tol=1e-9)
    assert math.isclose(bounds.lower, bounds.middle, rel_tol=1e-9)


def test_sandwich_beyond_float_range():
    log_lower, log_middle, log_upper = log_binom_sandwich(2.0, 1e200, 1e200)
    # (x+y)^2 - x^2 - y^2 = 2xy and the upper sum is C(2,1)(xy + xy)
    assert log_lower == -math.inf
    assert log_middle == pytest.approx(math.log(2.0) + 400.0 * math.log(10.0), rel=1e-12)
    assert log_upper == pytest.approx(math.log(4.0) + 400.0 * math.log(10.0), rel=1e-12)

    bounds = binom_sandwich(2.0, 1e200, 1e200)
    assert bounds.lower == 0.0
    assert bounds.middle == math.inf and bounds.upper == math.inf


def test_log_sandwich_matches_direct_evaluation():
    bounds = binom_sandwich(4.5, 3.0, 0.2)
    logs = log_binom_sandwich(4.5, 3.0, 0.2)
    assert [math.exp(v) for v in logs] == pytest.approx([bounds.lower, bounds.middle, bounds.upper], rel=1e-12)


@settings(max_examples=300, deadline=None)
@given(
    p=st.floats(1.0, 25.0, exclude_min=True),
    log_x=st.floats(-3.0, 3.0),
    log_y=st.floats(-3.0, 3.0),
)
def test_sandwich_orders_terms(p, log_x, log_y):
    bounds = binom_sandwich(p, 10.0**log_x, 10.0**log_y)
    assert bounds.lower <= bounds.middle * (1 + 1e-12)
    assert bounds.middle <= bounds.upper * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(
    p=st.sampled_from([3.0, 5.0, 7.0, 9.0, 15.0, 25.0]),
    log_x=st.floats(-3.0, 3.0),
    log_y=st.floats(-3.0, 3.0),
)
def test_sandwich_equality_at_odd_integers(p, log_x, log_y):
    bounds = binom_sandwich(p, 10.0**log_x, 10.0**log_y)
    assert math.isclose(bounds.lower, bounds.middle, rel_tol=1e-12)
