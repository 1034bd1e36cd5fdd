"""
Generalized binomial coefficients and the binomial sandwich
sum_{k<k_p} <= (x+y)^p - x^p - y^p <= sum_{k<=k_p}.
"""

import logging
import math
from typing import Tuple

import numpy as np
from scipy.special import binom, logsumexp

from backend.shared.exceptions import DomainError
from backend.shared.models import BinomOrder, SandwichBounds


logger = logging.getLogger(__name__)

# Outside this range powers are taken in log space
_LOG_SPACE_LOW = 1e-100
_LOG_SPACE_HIGH = 1e100
_LOG_FLOAT_MAX = float(np.log(np.finfo(float).max))


def split_index(p: float) -> int:
    """k_p = floor((p+1)/2)."""
    return int(math.floor((p + 1.0) / 2.0))


def binom_order(p: float) -> BinomOrder:
    return BinomOrder(p=p, k_p=split_index(p))


def gen_binom(p: float, k: int) -> float:
    """
    Binomial coefficient p(p-1)...(p-k+1)/k! for real p.

    Args:
        p: Real order
        k: Nonnegative integer

    Returns:
        The coefficient; 1 for k = 0
    """
    if k < 0:
        raise DomainError(f"Binomial index must be nonnegative, got {k}")
    return float(binom(p, k))


def _exp(log_value: float) -> float:
    return math.inf if log_value > _LOG_FLOAT_MAX else math.exp(log_value)


def _pair_term(p: float, k: int, x: float, y: float) -> float:
    """x^k y^{p-k} + x^{p-k} y^k."""
    return x**k * y ** (p - k) + x ** (p - k) * y**k


def _log_pair_term(p: float, k: int, log_x: float, log_y: float) -> float:
    return float(np.logaddexp(k * log_x + (p - k) * log_y, (p - k) * log_x + k * log_y))


def _bracket(p: float, t: float) -> float:
    """(1+t)^p - 1 - t^p for 0 < t <= 1, free of cancellation for small t."""
    return math.expm1(p * math.log1p(t)) - t**p


def _check_arguments(p: float, x: float, y: float) -> None:
    if x <= 0 or y <= 0:
        raise DomainError("binom_sandwich needs x > 0 and y > 0")
    if p <= 1:
        raise DomainError(f"binom_sandwich needs p > 1, got {p}")


def log_binom_sandwich(p: float, x: float, y: float) -> Tuple[float, float, float]:
    """
    Logs of the lower sum, the middle term and the upper sum.

    Every term stays in log space, so arguments whose powers leave the float
    range still give finite results. The coefficients C(p, k) are positive
    for k <= k_p.

    Returns:
        (log lower, log middle, log upper); log lower is -inf when k_p = 1
    """
    _check_arguments(p, x, y)
    log_x, log_y = math.log(x), math.log(y)
    k_p = split_index(p)
    logs = [
        math.log(gen_binom(p, k)) + _log_pair_term(p, k, log_x, log_y)
        for k in range(1, k_p + 1)
    ]
    log_lower = float(logsumexp(logs[:-1])) if len(logs) > 1 else -math.inf
    log_upper = float(logsumexp(logs))

    log_small, log_large = min(log_x, log_y), max(log_x, log_y)
    bracket = _bracket(p, math.exp(log_small - log_large))
    log_middle = p * log_large + math.log(bracket) if bracket > 0 else -math.inf
    return log_lower, log_middle, log_upper


def binom_sandwich(p: float, x: float, y: float) -> SandwichBounds:
    """
    Evaluate both binomial sums and the middle term.

    Args:
        p: Real order > 1
        x, y: Positive reals

    Returns:
        SandwichBounds(lower, middle, upper) with lower <= middle <= upper;
        values past the float range saturate to inf
    """
    _check_arguments(p, x, y)
    if any(value < _LOG_SPACE_LOW or value > _LOG_SPACE_HIGH for value in (x, y)):
        log_lower, log_middle, log_upper = log_binom_sandwich(p, x, y)
        return SandwichBounds(lower=_exp(log_lower), middle=_exp(log_middle), upper=_exp(log_upper))

    k_p = split_index(p)
    lower = 0.0
    for k in range(1, k_p):
        lower += gen_binom(p, k) * _pair_term(p, k, x, y)
    upper = lower + gen_binom(p, k_p) * _pair_term(p, k_p, x, y)

    small, large = min(x, y), max(x, y)
    middle = large**p * _bracket(p, small / large)
    return SandwichBounds(lower=lower, middle=middle, upper=upper)
