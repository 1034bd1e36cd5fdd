"""
Normalized moments z_p = m_p / Gamma(ap + b) and their growth analysis.
"""

import logging
import math
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.special import betaln, gammaln

from backend.combinatorics_service.binomial import split_index
from backend.moment_service.grid import MomentGrid, Side, round_down, round_up
from backend.shared.config import settings
from backend.shared.exceptions import DomainError, MissingMomentError
from backend.shared.models import GeometricFit


logger = logging.getLogger(__name__)

_MIN_GEOMETRIC_POINTS = 8
# half steps per recursion stride of 3/2
_TREND_STRIDE = 3


class NormalizedMoments:
    """z_p on a half-integer grid, stored as log intervals."""

    def __init__(
        self,
        a: float,
        b: float,
        p: np.ndarray,
        log_z_lo: np.ndarray,
        log_z_hi: np.ndarray,
    ):
        self.a = a
        self.b = b
        self.p = np.asarray(p, dtype=float)
        self.log_z_lo = np.asarray(log_z_lo, dtype=float)
        self.log_z_hi = np.asarray(log_z_hi, dtype=float)
        self.growth: Optional[Tuple[float, float]] = None
        self.fit: Optional[GeometricFit] = None

    @classmethod
    def from_values(cls, values: Dict[float, float], a: float, b: float) -> "NormalizedMoments":
        """Degenerate intervals from given z values."""
        ps = np.array(sorted(values))
        with np.errstate(divide="ignore"):
            logs = np.log(np.array([values[p] for p in ps], dtype=float))
        return cls(a, b, ps, logs, logs.copy())

    @classmethod
    def from_log_values(
        cls, p: np.ndarray, log_z: np.ndarray, a: float, b: float
    ) -> "NormalizedMoments":
        log_z = np.asarray(log_z, dtype=float)
        return cls(a, b, p, log_z, log_z.copy())

    @property
    def one_sided(self) -> bool:
        """True when no entry above p = 0 carries a positive lower end."""
        return bool(np.all(self.log_z_lo[self.p > 0] == -np.inf))

    def _index(self, p: float) -> Optional[int]:
        hits = np.flatnonzero(np.abs(self.p - p) < 1e-9)
        return int(hits[0]) if hits.size else None

    def has(self, p: float) -> bool:
        return self._index(p) is not None

    def log_z(self, p: float, side: Side) -> float:
        idx = self._index(p)
        if idx is None:
            raise MissingMomentError([p])
        return float(self.log_z_lo[idx] if side == Side.LO else self.log_z_hi[idx])

    def z(self, p: float, side: Side = Side.HI) -> float:
        return math.exp(self.log_z(p, side))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "p": self.p,
                "a": self.a,
                "b": self.b,
                "z_lo": np.exp(self.log_z_lo),
                "z_hi": np.exp(self.log_z_hi),
            }
        )

    def __repr__(self) -> str:
        return f"NormalizedMoments(a={self.a:.4g}, b={self.b:.4g}, points={self.p.size})"


def normalize(grid: MomentGrid, a: float, b: float) -> NormalizedMoments:
    """
    Divide every present interval by Gamma(ap + b).

    Args:
        grid: Moment grid
        a: Growth exponent a >= 1
        b: Shift b > 0

    Returns:
        NormalizedMoments with outward-rounded log intervals
    """
    if a < 1.0:
        raise DomainError(f"Normalization needs a >= 1, got {a}")
    if b <= 0.0:
        raise DomainError(f"Normalization needs b > 0, got {b}")

    mask = grid.present
    p = grid.p_values[mask]
    log_gamma = gammaln(a * p + b)
    log_lo = round_down(grid.log_lo[mask] - log_gamma)
    log_hi = round_up(grid.log_hi[mask] - log_gamma)
    return NormalizedMoments(a, b, p, log_lo, log_hi)


def gamma_ratio_asymptotic(p: float, r: float, s: float) -> float:
    """Gamma(p + r) / Gamma(p + s) * p^(s - r), which tends to 1 as p grows."""
    return math.exp(gammaln(p + r) - gammaln(p + s) + (s - r) * math.log(p))


def _surplus_term(p: float, k: int, a: float, b: float) -> float:
    """C(p,k) [B(k + a/2 + b, p - k + b) + B(k + b, p - k + a/2 + b)]."""
    log_coeff = gammaln(p + 1.0) - gammaln(k + 1.0) - gammaln(p - k + 1.0)
    first = betaln(k + a / 2.0 + b, p - k + b)
    second = betaln(k + b, p - k + a / 2.0 + b)
    return float(np.exp(log_coeff + first) + np.exp(log_coeff + second))


def _interval_sup(k: int, lo: float, hi: float, a: float, b: float, n: int) -> Tuple[float, List[Tuple[float, float]]]:
    """Max of the k-th term over [lo, hi] (hi included as a left limit)."""
    grid = np.linspace(lo, hi, n)
    values = np.array([_surplus_term(p, k, a, b) for p in grid])
    best = int(np.argmax(values))
    left = grid[max(best - 1, 0)]
    right = grid[min(best + 1, n - 1)]
    peak = float(values[best])
    if right > left:
        result = minimize_scalar(
            lambda p: -_surplus_term(p, k, a, b),
            bounds=(left, right),
            method="bounded",
            options={"xatol": 1e-12},
        )
        peak = max(peak, -float(result.fun))
    return peak, list(zip(grid, values))


@lru_cache(maxsize=64)
def compute_surplus_constant(
    a: float,
    b: float,
    n_points: Optional[int] = None,
    p_tail: Optional[float] = None,
) -> float:
    """
    Uniform constant A(a, b) with S_p <= A Gamma(ap + a/2 + 2b) Z_p for all p > 1.

    A = B(a/2 + b, b) + sup_p C(p, k_p) [B(k_p + a/2 + b, p - k_p + b) + B(k_p + b, p - k_p + a/2 + b)].
    The supremum runs over p in (1, p_tail] piecewise in k_p, including the left
    limits at odd integers; beyond p_tail the O(1/p) decay is bounded by the
    largest p * term on [p_tail / 2, p_tail].

    Args:
        a: Growth exponent >= 1
        b: Shift > 0
        n_points: Total grid points over (1, p_tail] (defaults to settings)
        p_tail: Start of the asymptotic envelope (defaults to settings)
    """
    if a < 1.0 or b <= 0.0:
        raise DomainError(f"Surplus constant needs a >= 1 and b > 0, got a={a}, b={b}")
    n_points = settings.A_GRID_POINTS if n_points is None else n_points
    p_tail = settings.A_P_TAIL if p_tail is None else p_tail

    n_intervals = split_index(p_tail)
    per_interval = max(16, n_points // max(n_intervals, 1))

    sup = 0.0
    tail_envelope = 0.0
    for k in range(1, n_intervals + 1):
        # k_p = k on [2k - 1, 2k + 1)
        lo = max(1.0, 2.0 * k - 1.0)
        hi = min(2.0 * k + 1.0, p_tail)
        if hi <= lo:
            continue
        peak, samples = _interval_sup(k, lo, hi, a, b, per_interval)
        sup = max(sup, peak)
        for p, value in samples:
            if p >= p_tail / 2.0:
                tail_envelope = max(tail_envelope, p * value)

    sup = max(sup, tail_envelope / p_tail)
    constant = math.exp(betaln(a / 2.0 + b, b)) + sup
    logger.debug("Surplus constant A(%.4g, %.4g) = %.10g", a, b, constant)
    return constant


def surplus_normalized_bound(
    p: float, z: NormalizedMoments, surplus_constant: Optional[float] = None
) -> float:
    """
    Upper bound A(a,b) Gamma(ap + a/2 + 2b) Z_p on the surplus S_p.

    Z_p = max_{1<=k<=k_p} {z_{k+1/2} z_{p-k}, z_k z_{p-k+1/2}} on upper ends.
    """
    if p <= 1.0:
        raise DomainError(f"Surplus bound needs p > 1, got {p}")
    needed = set()
    for k in range(1, split_index(p) + 1):
        needed.update({k + 0.5, p - k, float(k), p - k + 0.5})
    missing = [q for q in needed if not z.has(q)]
    if missing:
        raise MissingMomentError(missing)

    log_zp = -math.inf
    for k in range(1, split_index(p) + 1):
        log_zp = max(
            log_zp,
            z.log_z(k + 0.5, Side.HI) + z.log_z(p - k, Side.HI),
            z.log_z(float(k), Side.HI) + z.log_z(p - k + 0.5, Side.HI),
        )
    if log_zp == -math.inf:
        return 0.0

    constant = compute_surplus_constant(z.a, z.b) if surplus_constant is None else surplus_constant
    a, b = z.a, z.b
    return math.exp(math.log(constant) + gammaln(a * p + a / 2.0 + 2.0 * b) + log_zp)


def _nuisance(p: np.ndarray) -> np.ndarray:
    # geometric part plus the power and 1/p corrections of Gamma ratios
    return np.column_stack([np.ones_like(p), p, np.log(p), 1.0 / p])


def _trend(p: np.ndarray, log_z: np.ndarray) -> float:
    """
    Coefficient c of a residual c p log p in log z_p.

    Differences are taken over one full step of 3/2, the stride of the steady
    balance recursion, so every difference stays inside one recursion chain
    and the seed offsets of the chains cancel. Such a difference behaves as
    (3/2) c log p + const + O(1/p), which is what gets fitted.
    """
    stride = _TREND_STRIDE
    steps = log_z[stride:] - log_z[:-stride]
    base = p[:-stride]
    design = np.column_stack([np.ones_like(base), np.log(base), 1.0 / base])
    coeffs, *_ = np.linalg.lstsq(design, steps, rcond=None)
    return float(coeffs[1]) / (0.5 * stride)


def flatness_residual(p: np.ndarray, log_z: np.ndarray) -> float:
    """RMS residual of log z_p against [1, p, log p, 1/p]."""
    design = _nuisance(p)
    coeffs, *_ = np.linalg.lstsq(design, log_z, rcond=None)
    return float(np.sqrt(np.mean((design @ coeffs - log_z) ** 2)))


def geometric_check(
    z: NormalizedMoments, p_from: float, tol: Optional[float] = None
) -> GeometricFit:
    """
    Fit c q^p <= z_p <= C Q^p on p >= p_from.

    q and Q are the extreme squared half-step ratios z_{p+1/2}/z_p. Since any
    finite range gives finite ratios, the fit also requires no residual
    p log p trend in log z_p, the signature of a mis-chosen a.

    Args:
        z: Normalized moments
        p_from: First order of the validated range (p_from >= 1 recommended)
        tol: Largest accepted |p log p| coefficient (defaults to settings)

    Returns:
        GeometricFit; holds is False when the envelope or the trend test fails
    """
    tol = settings.GROWTH_SLOPE_TOL if tol is None else tol
    mask = (z.p >= p_from - 1e-9) & (z.p > 0)
    p = z.p[mask]
    if p.size < _MIN_GEOMETRIC_POINTS:
        raise DomainError(
            f"geometric_check needs at least {_MIN_GEOMETRIC_POINTS} points above p = {p_from}, got {p.size}"
        )
    if np.any(np.abs(np.diff(p) - 0.5) > 1e-9):
        raise DomainError("geometric_check needs consecutive half-integer orders")

    lo, hi = z.log_z_lo[mask], z.log_z_hi[mask]
    one_sided = bool(np.all(lo == -np.inf))

    def envelope(values: np.ndarray) -> Tuple[float, float]:
        steps = 2.0 * np.diff(values)
        with np.errstate(invalid="ignore"):
            return float(np.exp(np.min(steps))), float(np.exp(np.max(steps)))

    upper_finite = bool(np.all(np.isfinite(hi)))
    q_hi, big_q = envelope(hi) if upper_finite else (math.nan, math.inf)
    if one_sided:
        q = q_hi
    elif np.all(np.isfinite(lo)):
        q, _ = envelope(lo)
    else:
        q = 0.0

    with np.errstate(divide="ignore", invalid="ignore"):
        c = float(np.min(np.exp(lo - p * math.log(q)))) if q > 0 and not one_sided else 0.0
        big_c = float(np.max(np.exp(hi - p * math.log(big_q)))) if 0 < big_q < math.inf else math.inf

    upper_trend = _trend(p, hi) if upper_finite else None
    lower_trend = _trend(p, lo) if np.all(np.isfinite(lo)) and not one_sided else None

    trends = [t for t in (upper_trend, lower_trend) if t is not None]
    holds = (
        bool(trends)
        and all(abs(t) <= tol for t in trends)
        and all(math.isfinite(x) and x > 0 for x in (q, big_q))
    )

    fit = GeometricFit(
        q=q,
        Q=big_q,
        c=c,
        C=big_c,
        holds=holds,
        p_from=float(p[0]),
        p_to=float(p[-1]),
        lower_trend=lower_trend,
        upper_trend=upper_trend,
        one_sided=one_sided,
    )
    if holds:
        z.growth = (q, big_q)
        z.fit = fit
    return fit
